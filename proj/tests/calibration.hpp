#pragma once

// MINE calibration on bivariate Gaussians, shared by the unit and
// acceptance tests.

#include "intapt/mine.hpp"

#include <cmath>
#include <deque>
#include <numeric>
#include <random>

namespace intapt::testing {

/// Analytic I(X; Y) of a standard bivariate Gaussian with correlation rho.
inline double gaussian_mi(double rho) { return -0.5 * std::log(1.0 - rho * rho); }

struct Calibration {
  /// Mean of the last `window` DV estimates seen during training.
  double moving_average = 0.0;
  double analytic = 0.0;
};

/// Trains a critic on fresh (x, y) batches with corr(x, y) = rho.
inline Calibration calibrate_mine(double rho, std::uint64_t seed, int steps = 3000,
                                  int batch = 256, int window = 100) {
  mine::CriticOptions opt;
  opt.hidden = 64;
  opt.adam.learning_rate = 1e-3;
  opt.adam.weight_decay = 0.0;
  mine::MineCritic critic(1, 1, opt, seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> n01(0.0, 1.0);
  const double side = std::sqrt(1.0 - rho * rho);
  std::deque<double> recent;
  for (int s = 0; s < steps; ++s) {
    nn::Matrix x(batch, 1), y(batch, 1);
    for (int i = 0; i < batch; ++i) {
      x(i, 0) = n01(rng);
      y(i, 0) = rho * x(i, 0) + side * n01(rng);
    }
    recent.push_back(critic.update(x, y));
    if (static_cast<int>(recent.size()) > window) recent.pop_front();
  }
  Calibration c;
  c.moving_average = std::accumulate(recent.begin(), recent.end(), 0.0) / recent.size();
  c.analytic = gaussian_mi(rho);
  return c;
}

}  // namespace intapt::testing
