#include "intapt/probe.hpp"

#include "intapt/error.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

namespace intapt::analysis {

ProbeResult linear_probe(const Matrix &features, std::span<const int> labels, std::uint64_t seed,
                         double test_fraction, double l2, int iterations) {
  const Eigen::Index n = features.rows();
  if (n != static_cast<Eigen::Index>(labels.size()) || n < 4) {
    throw ConfigError("linear_probe: need >= 4 labelled rows");
  }
  std::map<int, int> classes;
  for (int y : labels) classes.emplace(y, 0);
  int k = 0;
  for (auto &[label, idx] : classes) idx = k++;
  if (k < 2) throw ConfigError("linear_probe: need at least two classes");

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::round(n * test_fraction)));
  const Eigen::Index n_train = n - n_test;

  auto gather = [&](Eigen::Index begin, Eigen::Index count, Matrix &x, std::vector<int> &y) {
    x.resize(count, features.cols());
    y.resize(static_cast<std::size_t>(count));
    for (Eigen::Index i = 0; i < count; ++i) {
      x.row(i) = features.row(order[begin + i]);
      y[i] = classes.at(labels[order[begin + i]]);
    }
  };
  Matrix xtr, xte;
  std::vector<int> ytr, yte;
  gather(0, n_train, xtr, ytr);
  gather(n_train, n_test, xte, yte);

  const nn::RowVector mu = xtr.colwise().mean();
  nn::RowVector sd = ((xtr.rowwise() - mu).array().square().colwise().mean()).sqrt();
  sd = sd.cwiseMax(1e-8);
  auto standardise = [&](Matrix &x) {
    x = ((x.rowwise() - mu).array().rowwise() / sd.array()).matrix();
  };
  standardise(xtr);
  standardise(xte);

  Matrix w = Matrix::Zero(features.cols(), k);
  nn::RowVector b = nn::RowVector::Zero(k);
  Matrix mw = w, vw = w;
  nn::RowVector mb = b, vb = b;
  Matrix onehot = Matrix::Zero(n_train, k);
  for (Eigen::Index i = 0; i < n_train; ++i) onehot(i, ytr[i]) = 1.0;
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int it = 1; it <= iterations; ++it) {
    Matrix logits = (xtr * w).rowwise() + b;
    for (Eigen::Index i = 0; i < n_train; ++i) {
      const double m = logits.row(i).maxCoeff();
      logits.row(i) = (logits.row(i).array() - m).exp();
      logits.row(i) /= logits.row(i).sum();
    }
    const Matrix delta = (logits - onehot) / static_cast<double>(n_train);
    const Matrix gw = xtr.transpose() * delta + l2 * w;
    const nn::RowVector gb = delta.colwise().sum();
    mw = b1 * mw + (1 - b1) * gw;
    vw = b2 * vw + (1 - b2) * gw.cwiseAbs2();
    mb = b1 * mb + (1 - b1) * gb;
    vb = b2 * vb + (1 - b2) * gb.cwiseAbs2();
    const double c1 = 1 - std::pow(b1, it), c2 = 1 - std::pow(b2, it);
    w.array() -= lr * (mw.array() / c1) / ((vw.array() / c2).sqrt() + eps);
    b.array() -= lr * (mb.array() / c1) / ((vb.array() / c2).sqrt() + eps);
  }

  auto accuracy = [&](const Matrix &x, const std::vector<int> &y) {
    const Matrix logits = (x * w).rowwise() + b;
    int hits = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      Eigen::Index arg = 0;
      logits.row(i).maxCoeff(&arg);
      hits += static_cast<int>(arg) == y[i];
    }
    return static_cast<double>(hits) / static_cast<double>(x.rows());
  };
  ProbeResult out;
  out.train_accuracy = accuracy(xtr, ytr);
  out.test_accuracy = accuracy(xte, yte);
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (int y : yte) ++counts[y];
  out.chance = static_cast<double>(*std::max_element(counts.begin(), counts.end())) /
               static_cast<double>(yte.size());
  return out;
}

Matrix project_2d(const Matrix &features) {
  if (features.rows() < 1 || features.cols() < 2) {
    throw ConfigError("project_2d: need at least one row and two columns");
  }
  const Matrix centred = features.rowwise() - features.colwise().mean();
  const Matrix cov = centred.transpose() * centred / std::max<double>(1.0, features.rows() - 1.0);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  // Eigenvalues ascend; take the last two columns.
  const Eigen::Index d = cov.rows();
  Matrix axes(d, 2);
  axes.col(0) = eig.eigenvectors().col(d - 1);
  axes.col(1) = eig.eigenvectors().col(d - 2);
  return centred * axes;
}

double cosine(const nn::Vector &a, const nn::Vector &b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ConfigError("pearson: need paired samples");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace intapt::analysis
