#pragma once

// ExperimentConfig: every hyperparameter of a run in one serialisable record.

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace intapt {

inline constexpr int kConfigSchemaVersion = 1;

enum class AccentGroup { kL1, kMFA, kLFA, kUA };

std::string to_string(AccentGroup g);
AccentGroup accent_group_from_string(const std::string &s);

struct CorpusConfig {
  int d_feat = 16;
  int vocab_size = 10;
  int min_tokens = 3;
  int max_tokens = 6;
  int frames_per_token = 4;
  double noise_sigma = 0.05;
  /// Magnitude of the accent direction shift at intensity 1.
  double shift_scale = 1.0;
  /// Interpolation weight towards a random per-accent rotation at intensity 1.
  double mixing_strength = 0.0;
  /// Interpolation weight towards the token substitution, at any intensity.
  double substitution_strength = 0.8;
  /// Pairwise cosine between accent directions (a shared L2 component).
  double shared_direction = 0.0;
  /// Dimension of the subspace holding the private part of every accent
  /// direction (0: one orthogonal axis per accent).
  int accent_subspace_dim = 2;
  /// L2 accents come in pairs with opposite private directions.
  bool antipodal_pairs = true;
  /// Token swaps common to every accent and private to each one.
  int shared_swaps = 2;
  int private_swaps = 0;
  /// Magnitude of the nuisance offset (+/-) along a direction orthogonal to
  /// every accent direction.
  double nuisance_scale = 0.05;
  double warp_min = 0.1;
  double warp_max = 0.35;
  int n_l2_transcripts = 150;
  double train_ratio = 0.8;
  double dev_ratio = 0.1;
  double test_ratio = 0.1;
  int speakers_per_accent = 2;
  int n_l1_pretrain = 800;
  int n_l1_dev = 60;
  int n_l1_test = 60;
  double intensity_mean_min = 0.55;
  double intensity_mean_max = 0.9;
  /// Per-utterance intensity = speaker mean + spread * (Beta(2,2) - 0.5).
  double intensity_spread = 0.4;
  /// Group of each accent id (index = accent id). Exactly one L1.
  std::vector<AccentGroup> groups = {AccentGroup::kL1,  AccentGroup::kMFA, AccentGroup::kMFA,
                                     AccentGroup::kLFA, AccentGroup::kLFA, AccentGroup::kUA,
                                     AccentGroup::kUA};
};

struct BackboneConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int tap_layer = 1;
  int max_len = 96;
  /// Filled from CorpusConfig.
  int d_feat = 16;
  int vocab_size = 10;
};

struct PretrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 16;
  int min_epochs = 6;
  int max_epochs = 40;
  double target_wer = 0.10;
};

struct AccentModuleConfig {
  int d_acc = 256;
  int hidden = 128;
  int regressor_hidden = 64;
  int epochs = 40;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double lambda = 0.5;
};

struct MineConfig {
  int hidden = 32;
  double learning_rate = 1e-3;
  double ema_rate = 0.99;
  double output_clip = 20.0;
};

struct PromptConfig {
  int length = 8;
  int d_ff = 64;
  int n_heads = 4;
  /// count(PG) must stay below this fraction of count(backbone).
  double param_cap = 0.25;
  /// Open-question switch; false = CTC over all prompt + input frames.
  bool strip_prompt_frames = false;
  /// Greedy decoding over prompt positions too; false = input frames only.
  bool decode_prompt_frames = false;
  /// Scale of the output projection at initialisation.
  double init_gain = 0.1;
};

struct TrainConfig {
  int batch_size = 16;
  double lambda_mi = 0.3;
  double lr_finetune = 5e-5;
  double lr_prompt = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.005;
  double grad_clip = 5.0;
  int critic_steps = 1;
  int epochs = 12;
  /// Stop after this many optimisation steps (< 0: no limit).
  long max_steps = -1;
  /// Hash parameters around every min-max sub-step.
  bool check_minmax = true;
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 20240601;
  std::vector<std::uint64_t> regime_seeds = {1, 2, 3};
  CorpusConfig corpus;
  BackboneConfig backbone;
  PretrainConfig pretrain;
  AccentModuleConfig accent;
  MineConfig mine;
  PromptConfig prompt;
  TrainConfig train;
};

NLOHMANN_JSON_SERIALIZE_ENUM(AccentGroup, {{AccentGroup::kL1, "L1"},
                                           {AccentGroup::kMFA, "MFA"},
                                           {AccentGroup::kLFA, "LFA"},
                                           {AccentGroup::kUA, "UA"}})

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(
    CorpusConfig, d_feat, vocab_size, min_tokens, max_tokens, frames_per_token, noise_sigma,
    shift_scale, mixing_strength, substitution_strength, shared_direction,
    accent_subspace_dim, antipodal_pairs, shared_swaps, private_swaps, nuisance_scale, warp_min, warp_max, n_l2_transcripts,
    train_ratio, dev_ratio, test_ratio, speakers_per_accent, n_l1_pretrain, n_l1_dev, n_l1_test,
    intensity_mean_min, intensity_mean_max, intensity_spread, groups)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BackboneConfig, n_layers, d_model, n_heads, d_ff,
                                                tap_layer, max_len, d_feat, vocab_size)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PretrainConfig, learning_rate, batch_size,
                                                min_epochs, max_epochs, target_wer)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AccentModuleConfig, d_acc, hidden,
                                                regressor_hidden, epochs, batch_size, learning_rate,
                                                lambda)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MineConfig, hidden, learning_rate, ema_rate,
                                                output_clip)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PromptConfig, length, d_ff, n_heads, param_cap,
                                                strip_prompt_frames, decode_prompt_frames,
                                                init_gain)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, batch_size, lambda_mi, lr_finetune,
                                                lr_prompt, beta1, beta2, eps, weight_decay,
                                                grad_clip, critic_steps, epochs, max_steps,
                                                check_minmax)

void to_json(nlohmann::json &j, const ExperimentConfig &c);
void from_json(const nlohmann::json &j, ExperimentConfig &c);

/// Throws ConfigError on any invalid value; also syncs backbone dims with
/// the corpus.
void validate(ExperimentConfig &c);

ExperimentConfig load_config(const std::filesystem::path &path);
void save_config(const std::filesystem::path &path, const ExperimentConfig &c);

/// SHA-256 of the canonical JSON of the corpus section plus the seed; keys
/// the corpus cache.
std::string corpus_hash(const ExperimentConfig &c);
std::string config_hash(const ExperimentConfig &c);

}  // namespace intapt
