#pragma once

// The three adaptation regimes: Finetune (all backbone weights, on a copy),
// Prompt_ctc (prompt generator on CTC alone) and INTapt (prompt generator
// on CTC plus lambda * I(z', z), against a MINE critic).

#include "intapt/accent_module.hpp"
#include "intapt/backbone.hpp"
#include "intapt/mine.hpp"
#include "intapt/nn/optim.hpp"
#include "intapt/prompt_generator.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace intapt {

enum class Regime { kFinetune, kPromptCtc, kIntapt };
std::string to_string(Regime r);
Regime regime_from_string(const std::string &s);
bool uses_prompt(Regime r);

nn::AdamWOptions adamw_options(const TrainConfig &t, double learning_rate);

/// CTC over a prompted output of L' + L frames. With strip = false every
/// frame takes part (prompt positions may emit blanks); with strip = true
/// the first prompt_len rows are dropped first.
nn::Var ctc_over_prompted_output(nn::Var log_probs, std::span<const int> target,
                                 Eigen::Index prompt_len, bool strip);
double ctc_over_prompted_output(const Matrix &log_probs, std::span<const int> target,
                                Eigen::Index prompt_len, bool strip);

/// Decoding front-end shared by evaluation and training: either a backbone
/// alone or the frozen backbone behind a prompt generator.
class Recognizer {
 public:
  explicit Recognizer(const Backbone &backbone, const PromptGenerator *generator = nullptr);

  struct Pass {
    Matrix prompt;     // L' x d_model (empty without a generator)
    Matrix log_probs;  // (L' + L) x (V + 1)
    Matrix tap;        // (L' + L) x d_model
    /// Tap rows of the original input frames, the last L rows of `tap`.
    Matrix input_tap() const { return tap.bottomRows(tap.rows() - prompt.rows()); }
  };
  Pass run(const Matrix &features) const;
  ctc::TokenSeq decode(const Matrix &features) const;
  double wer(const corpus::Utterance &u) const;
  double mean_wer(std::span<const corpus::Utterance *const> us) const;

  const Backbone &backbone() const { return *backbone_; }
  const PromptGenerator *generator() const { return generator_; }

 private:
  const Backbone *backbone_;
  const PromptGenerator *generator_;
};

struct EvalRecord {
  int epoch = 0;
  long step = 0;
  double dev_wer = 0.0;
  double train_loss = 0.0;  // mean generator objective over the epoch
  double train_ctc = 0.0;
  double train_mi = 0.0;    // mean DV estimate seen by the generator
};

struct RunFingerprints {
  std::string backbone_start;
  std::string backbone_end;
  std::string am_start;
  std::string am_end;
  std::string generator;
  std::string critic;
  std::string finetuned;
};

struct RunCheckpoint {
  Regime regime = Regime::kPromptCtc;
  std::uint64_t seed = 0;
  nlohmann::json config;
  std::optional<PromptGenerator> generator;
  std::optional<mine::StatisticsNetwork> critic;
  std::optional<Backbone> finetuned;
  RunFingerprints fingerprints;
  /// dev_wer[e] is measured after e epochs; index 0 is the initial model.
  std::vector<EvalRecord> history;
  int selected_epoch = 0;
  /// Generator (or finetune) objective per optimisation step.
  std::vector<double> loss_trace;
  std::vector<double> mi_trace;
  long steps = 0;
  std::size_t trainable_parameters = 0;

  /// Recogniser for this checkpoint; `frozen` must outlive the result.
  Recognizer recognizer(const Backbone &frozen) const;

  /// Directory layout: config.json, weights.bin, critic.bin (INTapt),
  /// metrics.jsonl, fingerprints.json, run.json.
  void save(const std::filesystem::path &dir) const;
  static RunCheckpoint load(const std::filesystem::path &dir);
};

/// Seeds of one regime run. Shared between Prompt_ctc and INTapt so that
/// INTapt with lambda_mi = 0 reproduces Prompt_ctc exactly.
struct RunSeeds {
  std::uint64_t generator;
  std::uint64_t order;
  std::uint64_t critic;
};
RunSeeds run_seeds(std::uint64_t experiment_seed, std::uint64_t regime_seed);

/// Utterances the adaptation regimes train and select on.
std::vector<const corpus::Utterance *> adaptation_train_set(const corpus::Corpus &corpus);
std::vector<const corpus::Utterance *> adaptation_dev_set(const corpus::Corpus &corpus);

/// `am` is optional here; when given, its fingerprint is checked too.
RunCheckpoint train_prompt_ctc(const corpus::Corpus &corpus, const Backbone &backbone,
                               const ExperimentConfig &config, std::uint64_t seed,
                               const AccentModule *am = nullptr);
RunCheckpoint train_intapt(const corpus::Corpus &corpus, const Backbone &backbone,
                           const AccentModule &am, const ExperimentConfig &config,
                           std::uint64_t seed);
RunCheckpoint train_finetune(const corpus::Corpus &corpus, const Backbone &backbone,
                             const ExperimentConfig &config, std::uint64_t seed);

/// Dispatches on regime; `am` is required by INTapt and fingerprinted by
/// Prompt_ctc.
RunCheckpoint train_regime(Regime regime, const corpus::Corpus &corpus, const Backbone &backbone,
                           const AccentModule *am, const ExperimentConfig &config,
                           std::uint64_t seed);

}  // namespace intapt
