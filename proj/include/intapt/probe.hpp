#pragma once

#include "intapt/nn/graph.hpp"

#include <cstdint>
#include <span>

namespace intapt::analysis {

using nn::Matrix;

struct ProbeResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  /// Majority-class rate on the test half.
  double chance = 0.0;
};

/// Multinomial logistic regression on standardised features, trained on a
/// random (1 - test_fraction) share and scored on the rest.
ProbeResult linear_probe(const Matrix &features, std::span<const int> labels,
                         std::uint64_t seed, double test_fraction = 0.5,
                         double l2 = 1e-3, int iterations = 400);

/// Top-2 principal axes projection of the centred rows (n x 2).
Matrix project_2d(const Matrix &features);

double cosine(const nn::Vector &a, const nn::Vector &b);
double pearson(std::span<const double> a, std::span<const double> b);

}  // namespace intapt::analysis
