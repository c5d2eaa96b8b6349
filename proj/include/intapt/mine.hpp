#pragma once

// Mutual information neural estimation with the Donsker-Varadhan bound:
//   I(X; Y) >= E_joint[T(x, y)] - log E_marginal[exp T(x, y)]
// Marginal samples come from a derangement of the batch.

#include "intapt/nn/archive.hpp"
#include "intapt/nn/optim.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

namespace intapt::mine {

using nn::Matrix;

/// Uniformly random cyclic permutation (Sattolo); perm[i] != i for n >= 2.
std::vector<int> derangement(std::size_t n, nn::Rng &rng);

/// T_phi(x, y): 3-layer MLP over the concatenated pair, output clamped.
class StatisticsNetwork {
 public:
  StatisticsNetwork() = default;
  StatisticsNetwork(int d_x, int d_y, int hidden, double output_clip, std::uint64_t seed);

  /// x: B x d_x, y: B x d_y -> B x 1.
  nn::Var operator()(nn::Graph &g, nn::Var x, nn::Var y) const;
  Matrix operator()(const Matrix &x, const Matrix &y) const;

  int d_x() const { return d_x_; }
  int d_y() const { return d_y_; }
  double output_clip() const { return clip_; }

  nn::ParameterList parameters();
  nn::ConstParameterList parameters() const;
  std::string fingerprint() const { return nn::fingerprint(parameters()); }

  void save(const std::filesystem::path &path, const nlohmann::json &metadata = {}) const;
  static StatisticsNetwork load(const std::filesystem::path &path,
                                nlohmann::json *metadata = nullptr);

 private:
  int hidden_ = 0;
  int d_x_ = 0;
  int d_y_ = 0;
  double clip_ = 20.0;
  nn::Mlp mlp_;
};

/// DV lower bound as a differentiable graph value; y is re-paired through
/// perm for the marginal term. Throws ConfigError for batches below 2.
nn::Var dv_estimate(nn::Graph &g, const StatisticsNetwork &t, nn::Var x, nn::Var y,
                    std::span<const int> perm);

/// DV estimate on one batch with a fresh derangement drawn from rng.
double estimate(const StatisticsNetwork &t, const Matrix &x, const Matrix &y, nn::Rng &rng);

struct CriticOptions {
  int hidden = 32;
  double output_clip = 20.0;
  double ema_rate = 0.99;
  nn::AdamWOptions adam;
};

/// Gradient-ascent trainer for T_phi. The gradient of the log-denominator
/// is taken against a bias-corrected moving average of E_marginal[exp T],
/// which removes most of the minibatch bias of the plain DV gradient.
class MineCritic {
 public:
  MineCritic(int d_x, int d_y, const CriticOptions &options, std::uint64_t seed);

  /// One ascent step on a batch; returns the DV estimate before the step.
  /// Throws StageError on a non-finite estimate or gradient.
  double update(const Matrix &x, const Matrix &y);

  const StatisticsNetwork &network() const { return *net_; }
  StatisticsNetwork &network() { return *net_; }
  nn::Rng &rng() { return rng_; }
  long steps() const { return adam_->steps(); }
  double ema() const { return ema_; }

 private:
  CriticOptions options_;
  std::unique_ptr<StatisticsNetwork> net_;
  std::unique_ptr<nn::AdamW> adam_;
  nn::Rng rng_;
  double ema_ = 0.0;
  long ema_updates_ = 0;
};

}  // namespace intapt::mine
