#include "intapt/config.hpp"

#include "intapt/error.hpp"
#include "intapt/hash.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace intapt {

std::string to_string(AccentGroup g) {
  nlohmann::json j = g;
  return j.get<std::string>();
}

AccentGroup accent_group_from_string(const std::string &s) {
  for (AccentGroup g : {AccentGroup::kL1, AccentGroup::kMFA, AccentGroup::kLFA, AccentGroup::kUA}) {
    if (to_string(g) == s) return g;
  }
  throw ConfigError("unknown accent group '" + s + "'");
}

void to_json(nlohmann::json &j, const ExperimentConfig &c) {
  j = nlohmann::json{{"schema_version", c.schema_version},
                     {"seed", c.seed},
                     {"regime_seeds", c.regime_seeds},
                     {"corpus", c.corpus},
                     {"backbone", c.backbone},
                     {"pretrain", c.pretrain},
                     {"accent", c.accent},
                     {"mine", c.mine},
                     {"prompt", c.prompt},
                     {"train", c.train}};
}

namespace {

// Every key of `j` must exist in `reference` (recursively for objects).
void check_known_keys(const nlohmann::json &j, const nlohmann::json &reference,
                      const std::string &path) {
  if (!j.is_object()) return;
  if (!reference.is_object()) throw ConfigError("config: '" + path + "' is not a section");
  for (const auto &[key, value] : j.items()) {
    const std::string at = path.empty() ? key : path + "." + key;
    if (!reference.contains(key)) throw ConfigError("config: unknown key '" + at + "'");
    if (value.is_object()) check_known_keys(value, reference.at(key), at);
  }
}

}  // namespace

void from_json(const nlohmann::json &j, ExperimentConfig &c) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  check_known_keys(j, nlohmann::json(ExperimentConfig{}), "");
  const ExperimentConfig defaults;
  c.schema_version = j.value("schema_version", defaults.schema_version);
  c.seed = j.value("seed", defaults.seed);
  c.regime_seeds = j.value("regime_seeds", defaults.regime_seeds);
  c.corpus = j.value("corpus", defaults.corpus);
  c.backbone = j.value("backbone", defaults.backbone);
  c.pretrain = j.value("pretrain", defaults.pretrain);
  c.accent = j.value("accent", defaults.accent);
  c.mine = j.value("mine", defaults.mine);
  c.prompt = j.value("prompt", defaults.prompt);
  c.train = j.value("train", defaults.train);
}

namespace {

void require(bool ok, const std::string &what) {
  if (!ok) throw ConfigError("config: " + what);
}

}  // namespace

void validate(ExperimentConfig &c) {
  require(c.schema_version == kConfigSchemaVersion,
          "schema_version " + std::to_string(c.schema_version) + " is not supported");
  const CorpusConfig &k = c.corpus;
  require(k.d_feat >= 2, "corpus.d_feat must be >= 2");
  require(k.vocab_size >= 2, "corpus.vocab_size must be >= 2");
  require(k.min_tokens >= 1 && k.max_tokens >= k.min_tokens, "corpus token length range");
  require(k.frames_per_token >= 2, "corpus.frames_per_token must be >= 2");
  require(k.noise_sigma >= 0.0, "corpus.noise_sigma must be >= 0");
  require(k.mixing_strength >= 0.0 && k.mixing_strength <= 1.0,
          "corpus.mixing_strength must lie in [0, 1]");
  require(k.substitution_strength >= 0.0 && k.substitution_strength <= 1.0,
          "corpus.substitution_strength must lie in [0, 1]");
  require(k.shift_scale >= 0.0, "corpus.shift_scale must be >= 0");
  require(k.shared_direction >= 0.0 && k.shared_direction < 0.8,
          "corpus.shared_direction must lie in [0, 0.8)");
  require(k.accent_subspace_dim == 0 || k.accent_subspace_dim >= 2,
          "corpus.accent_subspace_dim must be 0 or >= 2");
  require(k.shared_swaps >= 0 && k.private_swaps >= 0 &&
              2 * (k.shared_swaps + k.private_swaps) <= k.vocab_size,
          "corpus token swaps must fit in the vocabulary");
  require(k.warp_min >= 0.0 && k.warp_max >= k.warp_min && k.warp_max < 1.0,
          "corpus warp range must satisfy 0 <= min <= max < 1");
  require(k.train_ratio > 0 && k.dev_ratio > 0 && k.test_ratio > 0 &&
              std::abs(k.train_ratio + k.dev_ratio + k.test_ratio - 1.0) < 1e-9,
          "corpus split ratios must be positive and sum to 1");
  require(k.speakers_per_accent >= 1, "corpus.speakers_per_accent must be >= 1");
  require(k.n_l1_pretrain >= 1 && k.n_l1_dev >= 1 && k.n_l1_test >= 1, "corpus L1 split sizes");
  require(k.intensity_mean_min >= 0.0 && k.intensity_mean_max <= 1.0 &&
              k.intensity_mean_min <= k.intensity_mean_max,
          "corpus intensity mean range must lie in [0, 1]");
  require(std::count(k.groups.begin(), k.groups.end(), AccentGroup::kL1) == 1,
          "corpus.groups must name exactly one L1 accent");
  require(k.groups.size() >= 2, "corpus.groups needs at least one L2 accent");
  require(std::count(k.groups.begin(), k.groups.end(), AccentGroup::kMFA) >= 1,
          "corpus.groups needs at least one MFA accent");

  BackboneConfig &b = c.backbone;
  b.d_feat = k.d_feat;
  b.vocab_size = k.vocab_size;
  require(b.n_layers >= 1, "backbone.n_layers must be >= 1");
  require(b.n_heads >= 1 && b.d_model % b.n_heads == 0,
          "backbone.d_model must be divisible by n_heads");
  require(b.tap_layer >= 0 && b.tap_layer < b.n_layers, "backbone.tap_layer out of range");
  const double max_warp = 1.0 + k.warp_max;
  const int longest = static_cast<int>(std::ceil(k.max_tokens * k.frames_per_token * max_warp)) +
                      k.max_tokens;
  require(b.max_len >= longest + c.prompt.length,
          "backbone.max_len too small for the longest utterance plus prompt");

  require(c.pretrain.learning_rate > 0 && c.pretrain.batch_size >= 1 &&
              c.pretrain.max_epochs >= 1,
          "pretrain settings");
  require(c.accent.d_acc >= 1 && c.accent.hidden >= 1 && c.accent.regressor_hidden >= 1,
          "accent dims");
  require(c.accent.learning_rate > 0, "accent.learning_rate must be > 0");
  require(c.accent.epochs >= 1 && c.accent.batch_size >= 1, "accent epochs and batch_size");
  require(c.accent.lambda >= 0, "accent.lambda must be >= 0");
  require(c.mine.hidden >= 1 && c.mine.learning_rate > 0, "mine settings");
  require(c.mine.ema_rate > 0 && c.mine.ema_rate < 1, "mine.ema_rate must lie in (0, 1)");
  require(c.prompt.length >= 0, "prompt.length must be >= 0");
  require(c.prompt.n_heads >= 1 && b.d_model % c.prompt.n_heads == 0,
          "prompt.n_heads must divide d_model");
  require(c.prompt.param_cap > 0, "prompt.param_cap must be > 0");
  const TrainConfig &t = c.train;
  require(t.batch_size >= 2, "train.batch_size must be >= 2 (MI needs marginal samples)");
  require(t.lambda_mi >= 0, "train.lambda_mi must be >= 0");
  require(t.lr_finetune > 0 && t.lr_prompt > 0, "train learning rates must be > 0");
  require(t.beta1 >= 0 && t.beta1 < 1 && t.beta2 >= 0 && t.beta2 < 1 && t.eps > 0,
          "train AdamW moments");
  require(t.weight_decay >= 0, "train.weight_decay must be >= 0");
  require(t.critic_steps >= 1, "train.critic_steps must be >= 1");
  require(t.epochs >= 1, "train.epochs must be >= 1");
  require(!c.regime_seeds.empty(), "regime_seeds must not be empty");
}

ExperimentConfig load_config(const std::filesystem::path &path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path.string());
  ExperimentConfig c;
  try {
    c = nlohmann::json::parse(is).get<ExperimentConfig>();
  } catch (const nlohmann::json::exception &e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  validate(c);
  return c;
}

void save_config(const std::filesystem::path &path, const ExperimentConfig &c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  os << nlohmann::json(c).dump(2) << '\n';
}

std::string corpus_hash(const ExperimentConfig &c) {
  const nlohmann::json j = {{"seed", c.seed}, {"corpus", c.corpus}};
  return sha256_hex(j.dump());
}

std::string config_hash(const ExperimentConfig &c) { return sha256_hex(nlohmann::json(c).dump()); }

}  // namespace intapt
