#pragma once

// Small configurations and helpers shared by the unit tests.

#include "intapt/backbone.hpp"
#include "intapt/config.hpp"
#include "intapt/synthcorpus.hpp"

#include <chrono>
#include <filesystem>
#include <random>
#include <string>

namespace intapt::testing {

/// A corpus and models small enough for sub-second stages.
inline ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.seed = 7;
  c.regime_seeds = {1, 2};
  c.corpus.n_l2_transcripts = 20;
  c.corpus.n_l1_pretrain = 40;
  c.corpus.n_l1_dev = 8;
  c.corpus.n_l1_test = 8;
  c.corpus.max_tokens = 4;
  c.backbone.n_layers = 2;
  c.backbone.d_model = 16;
  c.backbone.n_heads = 2;
  c.backbone.d_ff = 32;
  c.backbone.tap_layer = 0;
  c.pretrain.min_epochs = 1;
  c.pretrain.max_epochs = 1;
  c.pretrain.target_wer = 1.01;
  c.accent.d_acc = 8;
  c.accent.hidden = 16;
  c.accent.regressor_hidden = 8;
  c.accent.epochs = 2;
  c.mine.hidden = 8;
  c.prompt.length = 2;
  c.prompt.d_ff = 16;
  c.prompt.n_heads = 2;
  c.prompt.param_cap = 2.0;
  c.train.batch_size = 8;
  c.train.epochs = 1;
  validate(c);
  return c;
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64 &rng,
                            double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Row-wise log-softmax.
inline Matrix log_softmax(const Matrix &logits) {
  Matrix out = logits;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double m = out.row(r).maxCoeff();
    const double lse = m + std::log((out.row(r).array() - m).exp().sum());
    out.row(r).array() -= lse;
  }
  return out;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string &tag) {
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("intapt-test-" + tag + "-" + std::to_string(stamp));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir &) = delete;
  TempDir &operator=(const TempDir &) = delete;
  const std::filesystem::path &path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace intapt::testing
