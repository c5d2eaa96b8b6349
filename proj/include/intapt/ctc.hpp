#pragma once

// Connectionist temporal classification: loss with gradients, exhaustive
// oracle, greedy decoding and token error rate.
//
// Label convention: column 0 of a log-probability matrix is the blank; the
// tokens of a transcript are 1..V.

#include "intapt/nn/graph.hpp"

#include <optional>
#include <span>
#include <vector>

namespace intapt::ctc {

using nn::Matrix;
using TokenSeq = std::vector<int>;

inline constexpr int kBlank = 0;

/// Throws ConfigError unless every row log-sum-exps to 0 within tol.
void check_log_probs(const Matrix &log_probs, double tol = 1e-5);

/// Minimum number of frames a target needs: one per token plus one blank
/// between each pair of equal neighbours.
int min_frames(std::span<const int> target);
bool feasible(int frames, std::span<const int> target);

struct LossAndGrad {
  double loss = 0.0;
  /// d loss / d log_probs, same shape as the input.
  Matrix grad;
};

/// -log p(target | log_probs) by the forward-backward recursion in log space.
/// log_probs rows need not be normalised. Throws StageError if infeasible.
double loss(const Matrix &log_probs, std::span<const int> target);
LossAndGrad loss_and_grad(const Matrix &log_probs, std::span<const int> target);

/// Graph op wrapping loss_and_grad; returns a 1 x 1 Var.
nn::Var loss(nn::Var log_probs, std::span<const int> target);

/// Mean of per-utterance losses.
double batch_mean(std::span<const double> per_utterance);

inline constexpr int kOracleMaxFrames = 8;

/// Exhaustive sum over every (V+1)^T path collapsing to target.
/// Returns nullopt when no path collapses to target (-log 0).
/// Throws ConfigError when T > kOracleMaxFrames.
std::optional<double> loss_oracle(const Matrix &log_probs, std::span<const int> target);

/// Removes repeats, then blanks.
TokenSeq collapse(std::span<const int> path);

/// Per-frame argmax followed by collapse().
TokenSeq greedy_decode(const Matrix &log_probs);

std::size_t edit_distance(std::span<const int> a, std::span<const int> b);

/// edit_distance(ref, hyp) / |ref|. Throws ConfigError on an empty reference.
double wer(std::span<const int> reference, std::span<const int> hypothesis);

}  // namespace intapt::ctc
