#include "intapt/ctc.hpp"

#include "intapt/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace intapt::ctc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

std::vector<int> extend(std::span<const int> target) {
  std::vector<int> ext;
  ext.reserve(2 * target.size() + 1);
  ext.push_back(kBlank);
  for (int t : target) {
    ext.push_back(t);
    ext.push_back(kBlank);
  }
  return ext;
}

void check_target(const Matrix &log_probs, std::span<const int> target) {
  if (log_probs.rows() < 1) throw ConfigError("ctc: need at least one frame");
  for (int t : target) {
    if (t <= kBlank || t >= log_probs.cols()) {
      throw ConfigError("ctc: target token " + std::to_string(t) + " outside 1.." +
                        std::to_string(log_probs.cols() - 1));
    }
  }
  if (!feasible(static_cast<int>(log_probs.rows()), target)) {
    throw StageError("ctc: target of length " + std::to_string(target.size()) + " needs " +
                     std::to_string(min_frames(target)) + " frames, only " +
                     std::to_string(log_probs.rows()) + " available");
  }
}

}  // namespace

void check_log_probs(const Matrix &log_probs, double tol) {
  if (log_probs.rows() < 1 || log_probs.cols() < 2) {
    throw ConfigError("ctc: log-prob matrix needs T >= 1 and at least one token column");
  }
  for (Eigen::Index t = 0; t < log_probs.rows(); ++t) {
    const double m = log_probs.row(t).maxCoeff();
    const double lse = m + std::log((log_probs.row(t).array() - m).exp().sum());
    if (!std::isfinite(lse) || std::abs(lse) > tol) {
      throw ConfigError("ctc: row " + std::to_string(t) + " is not normalised");
    }
  }
}

int min_frames(std::span<const int> target) {
  int n = static_cast<int>(target.size());
  for (std::size_t i = 1; i < target.size(); ++i) {
    if (target[i] == target[i - 1]) ++n;
  }
  return n;
}

bool feasible(int frames, std::span<const int> target) { return frames >= min_frames(target); }

LossAndGrad loss_and_grad(const Matrix &log_probs, std::span<const int> target) {
  check_target(log_probs, target);
  const std::vector<int> ext = extend(target);
  const int S = static_cast<int>(ext.size());
  const int T = static_cast<int>(log_probs.rows());
  auto skip_ok = [&](int s) { return ext[s] != kBlank && s >= 2 && ext[s - 2] != ext[s]; };

  Matrix alpha = Matrix::Constant(T, S, kNegInf);
  alpha(0, 0) = log_probs(0, ext[0]);
  if (S > 1) alpha(0, 1) = log_probs(0, ext[1]);
  for (int t = 1; t < T; ++t) {
    for (int s = 0; s < S; ++s) {
      double a = alpha(t - 1, s);
      if (s >= 1) a = log_add(a, alpha(t - 1, s - 1));
      if (skip_ok(s)) a = log_add(a, alpha(t - 1, s - 2));
      if (a != kNegInf) alpha(t, s) = a + log_probs(t, ext[s]);
    }
  }
  double log_z = alpha(T - 1, S - 1);
  if (S > 1) log_z = log_add(log_z, alpha(T - 1, S - 2));

  Matrix beta = Matrix::Constant(T, S, kNegInf);
  beta(T - 1, S - 1) = log_probs(T - 1, ext[S - 1]);
  if (S > 1) beta(T - 1, S - 2) = log_probs(T - 1, ext[S - 2]);
  for (int t = T - 2; t >= 0; --t) {
    for (int s = 0; s < S; ++s) {
      double b = beta(t + 1, s);
      if (s + 1 < S) b = log_add(b, beta(t + 1, s + 1));
      if (s + 2 < S && skip_ok(s + 2)) b = log_add(b, beta(t + 1, s + 2));
      if (b != kNegInf) beta(t, s) = b + log_probs(t, ext[s]);
    }
  }

  LossAndGrad out;
  out.loss = -log_z;
  out.grad = Matrix::Zero(log_probs.rows(), log_probs.cols());
  std::vector<double> occupancy(static_cast<std::size_t>(log_probs.cols()));
  for (int t = 0; t < T; ++t) {
    std::fill(occupancy.begin(), occupancy.end(), kNegInf);
    for (int s = 0; s < S; ++s) {
      if (alpha(t, s) == kNegInf || beta(t, s) == kNegInf) continue;
      occupancy[ext[s]] = log_add(occupancy[ext[s]], alpha(t, s) + beta(t, s));
    }
    for (Eigen::Index k = 0; k < log_probs.cols(); ++k) {
      if (occupancy[k] == kNegInf) continue;
      out.grad(t, k) = -std::exp(occupancy[k] - log_probs(t, k) - log_z);
    }
  }
  return out;
}

double loss(const Matrix &log_probs, std::span<const int> target) {
  return loss_and_grad(log_probs, target).loss;
}

nn::Var loss(nn::Var log_probs, std::span<const int> target) {
  LossAndGrad lg = loss_and_grad(log_probs.value(), target);
  Matrix value(1, 1);
  value(0, 0) = lg.loss;
  const std::size_t in = log_probs.id();
  return log_probs.graph().record(
      std::move(value), {log_probs},
      [in, grad = std::move(lg.grad)](nn::Graph &g, std::size_t self) {
        g.accumulate_expr(in, grad * g.node_grad(self)(0, 0));
      });
}

double batch_mean(std::span<const double> per_utterance) {
  if (per_utterance.empty()) throw ConfigError("ctc: empty batch");
  return std::accumulate(per_utterance.begin(), per_utterance.end(), 0.0) /
         static_cast<double>(per_utterance.size());
}

std::optional<double> loss_oracle(const Matrix &log_probs, std::span<const int> target) {
  const int T = static_cast<int>(log_probs.rows());
  const int K = static_cast<int>(log_probs.cols());
  if (T > kOracleMaxFrames) {
    throw ConfigError("ctc oracle: refusing T = " + std::to_string(T) + " > " +
                      std::to_string(kOracleMaxFrames));
  }
  std::vector<int> path(static_cast<std::size_t>(T), 0);
  double total = kNegInf;
  const TokenSeq want(target.begin(), target.end());
  while (true) {
    if (collapse(path) == want) {
      double lp = 0.0;
      for (int t = 0; t < T; ++t) lp += log_probs(t, path[t]);
      total = log_add(total, lp);
    }
    int t = T - 1;
    while (t >= 0 && path[t] == K - 1) path[t--] = 0;
    if (t < 0) break;
    ++path[t];
  }
  if (total == kNegInf) return std::nullopt;
  return -total;
}

TokenSeq collapse(std::span<const int> path) {
  TokenSeq out;
  int prev = -1;
  for (int p : path) {
    if (p != prev && p != kBlank) out.push_back(p);
    prev = p;
  }
  return out;
}

TokenSeq greedy_decode(const Matrix &log_probs) {
  std::vector<int> path(static_cast<std::size_t>(log_probs.rows()));
  for (Eigen::Index t = 0; t < log_probs.rows(); ++t) {
    Eigen::Index arg = 0;
    log_probs.row(t).maxCoeff(&arg);
    path[t] = static_cast<int>(arg);
  }
  return collapse(path);
}

std::size_t edit_distance(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double wer(std::span<const int> reference, std::span<const int> hypothesis) {
  if (reference.empty()) throw ConfigError("wer: empty reference");
  return static_cast<double>(edit_distance(reference, hypothesis)) /
         static_cast<double>(reference.size());
}

}  // namespace intapt::ctc
