#pragma once

// Transformer-encoder CTC recogniser. Pretrained on L1 speech and then used
// frozen; exposes the hidden state of every layer and accepts a prompt that
// is spliced in front of the embedded input.

#include "intapt/config.hpp"
#include "intapt/ctc.hpp"
#include "intapt/nn/archive.hpp"
#include "intapt/nn/layers.hpp"
#include "intapt/synthcorpus.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace intapt {

using nn::Matrix;

/// Per-layer outputs, each (L' + L) x d_model.
struct HiddenState {
  std::vector<Matrix> layers;
};

struct BackboneOutput {
  /// (L' + L) x (V + 1) log-probabilities; column 0 is blank.
  Matrix log_probs;
  HiddenState hidden;
};

/// Graph-level outputs, for callers that differentiate through the model.
struct BackboneVars {
  nn::Var log_probs;
  std::vector<nn::Var> hidden;
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig &config, std::uint64_t seed);

  const BackboneConfig &config() const { return config_; }

  /// Throws ConfigError when L > max_len.
  BackboneOutput forward(const Matrix &features) const;
  /// Prompt rows enter as the first L' embedded positions, bypassing the
  /// input projection. Throws ConfigError on dim mismatch or overlong input.
  BackboneOutput forward_with_prompt(const Matrix &prompt, const Matrix &features) const;
  /// prompt may be an invalid Var (no prompt) or an L' x d_model Var.
  BackboneVars forward(nn::Graph &g, nn::Var prompt, nn::Var features,
                       int stop_after_layer = -1) const;

  nn::ParameterList parameters();
  nn::ConstParameterList parameters() const;
  std::size_t parameter_count() const;
  std::string fingerprint() const;

  void save(const std::filesystem::path &path, const nlohmann::json &metadata = {}) const;
  static Backbone load(const std::filesystem::path &path, nlohmann::json *metadata = nullptr);

 private:
  BackboneConfig config_;
  nn::Linear input_;
  std::vector<nn::TransformerLayer> layers_;
  nn::LayerNorm final_norm_;
  nn::Linear head_;
};

/// WER of greedy decoding, averaged over utterances.
double mean_wer(const Backbone &backbone, std::span<const corpus::Utterance *const> utterances);

struct PretrainReport {
  std::vector<double> train_loss;  // per epoch
  std::vector<double> dev_wer;     // per epoch
  int epochs = 0;
  double final_dev_wer = 1.0;
  bool converged = false;
};

/// Trains a fresh backbone on l1_pretrain until l1_dev WER falls below
/// config.pretrain.target_wer. Throws StageError (with the final WER) if it
/// does not within max_epochs.
Backbone pretrain(const corpus::Corpus &corpus, const ExperimentConfig &config,
                  PretrainReport *report = nullptr);

}  // namespace intapt
