#pragma once

// Accent Module: mean-pools a tapped hidden state, maps it to an accent
// feature z, and supervises z with an accent classifier and an intensity
// regressor whose target is the frozen backbone's normalised CTC loss.

#include "intapt/backbone.hpp"
#include "intapt/config.hpp"
#include "intapt/nn/layers.hpp"
#include "intapt/synthcorpus.hpp"

#include <filesystem>
#include <vector>

namespace intapt {

using nn::Vector;

class AccentModule {
 public:
  AccentModule() = default;
  /// class_accents[k] is the accent id behind class k.
  AccentModule(const AccentModuleConfig &config, int d_model, std::vector<int> class_accents,
               std::uint64_t seed);

  const AccentModuleConfig &config() const { return config_; }
  int d_model() const { return d_model_; }
  int d_acc() const { return config_.d_acc; }
  const std::vector<int> &class_accents() const { return class_accents_; }

  /// z = extractor(mean over frames of tap). tap: L x d_model.
  nn::Var extract(nn::Graph &g, nn::Var tap) const;
  Vector extract(const Matrix &tap) const;
  /// Same as extract() but from an already mean-pooled 1 x d_model row.
  nn::Var extract_pooled(nn::Graph &g, nn::Var pooled) const;

  /// 1 x n_classes logits.
  nn::Var classify(nn::Graph &g, nn::Var z) const;
  Vector classify(const Vector &z) const;
  /// Predicted accent id (argmax over classes).
  int predict_accent(const Vector &z) const;

  /// 1 x 1 standardised per-frame CTC estimate.
  nn::Var predict_intensity(nn::Graph &g, nn::Var z) const;
  double predict_intensity(const Vector &z) const;

  /// Per-frame CTC normalisation learnt from the training set.
  double target_mean() const { return target_mean_; }
  double target_std() const { return target_std_; }
  void set_target_stats(double mean, double std);

  nn::ParameterList parameters();
  nn::ConstParameterList parameters() const;
  nn::ParameterList extractor_parameters();
  nn::ParameterList classifier_parameters();
  nn::ParameterList regressor_parameters();
  std::string fingerprint() const;

  void save(const std::filesystem::path &path, const nlohmann::json &metadata = {}) const;
  static AccentModule load(const std::filesystem::path &path, nlohmann::json *metadata = nullptr);

 private:
  AccentModuleConfig config_;
  int d_model_ = 0;
  std::vector<int> class_accents_;
  nn::Mlp extractor_;
  nn::Mlp classifier_;
  nn::Mlp regressor_;
  double target_mean_ = 0.0;
  double target_std_ = 1.0;
};

/// Regression target of one utterance: frozen-backbone CTC loss / frames.
double per_frame_ctc(const Backbone &backbone, const corpus::Utterance &u);

struct AccentTrainReport {
  std::vector<double> train_loss;
  std::vector<double> dev_loss;
  std::vector<double> dev_accuracy;
  int selected_epoch = -1;
  /// Largest |total - (CE + lambda * MSE)| over all batches.
  double max_decomposition_error = 0.0;
};

/// Utterances the Accent Module trains and validates on: L2 train (or dev)
/// plus a matching share of L1 speech (pretrain or dev split).
std::vector<const corpus::Utterance *> accent_training_set(const corpus::Corpus &corpus);
std::vector<const corpus::Utterance *> accent_dev_set(const corpus::Corpus &corpus);

/// Step 1: trains the Accent Module on the frozen backbone's tap layer.
AccentModule train_am(const corpus::Corpus &corpus, const Backbone &backbone,
                      const ExperimentConfig &config, AccentTrainReport *report = nullptr);

}  // namespace intapt
