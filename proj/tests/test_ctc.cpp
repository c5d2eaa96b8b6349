#include "fixtures.hpp"
#include "intapt/ctc.hpp"
#include "intapt/error.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace intapt;
using intapt::testing::log_softmax;
using intapt::testing::random_matrix;

namespace {

ctc::TokenSeq random_target(std::mt19937_64 &rng, int max_len, int vocab) {
  std::uniform_int_distribution<int> len(1, max_len), tok(1, vocab);
  ctc::TokenSeq t(len(rng));
  for (int &x : t) x = tok(rng);
  return t;
}

}  // namespace

TEST_CASE("ctc loss matches the exhaustive path sum") {
  std::mt19937_64 rng(11);
  int checked = 0;
  for (int i = 0; i < 200 && checked < 100; ++i) {
    const int vocab = 1 + static_cast<int>(rng() % 4);
    const int frames = 1 + static_cast<int>(rng() % 5);
    const ctc::TokenSeq target = random_target(rng, 3, vocab);
    if (!ctc::feasible(frames, target)) continue;
    const ctc::Matrix lp = log_softmax(random_matrix(frames, vocab + 1, rng, 2.0));
    const auto oracle = ctc::loss_oracle(lp, target);
    REQUIRE(oracle.has_value());
    CHECK(std::abs(ctc::loss(lp, target) - *oracle) < 1e-9);
    ++checked;
  }
  CHECK(checked == 100);
}

TEST_CASE("ctc oracle reports impossible targets") {
  const ctc::Matrix lp = log_softmax(ctc::Matrix::Zero(2, 3));
  const ctc::TokenSeq target{1, 1};  // needs a blank between the repeats
  CHECK_FALSE(ctc::feasible(2, target));
  CHECK_FALSE(ctc::loss_oracle(lp, target).has_value());
  CHECK_THROWS_AS(ctc::loss(lp, target), StageError);
  CHECK(ctc::min_frames(target) == 3);
}

TEST_CASE("ctc oracle refuses long inputs") {
  const ctc::Matrix lp = log_softmax(ctc::Matrix::Zero(ctc::kOracleMaxFrames + 1, 2));
  CHECK_THROWS_AS(ctc::loss_oracle(lp, ctc::TokenSeq{1}), ConfigError);
}

TEST_CASE("ctc gradient matches central differences") {
  std::mt19937_64 rng(5);
  const double h = 1e-4;
  for (int inst = 0; inst < 20; ++inst) {
    const int vocab = 1 + static_cast<int>(rng() % 4);
    const ctc::TokenSeq target = random_target(rng, 3, vocab);
    const int frames = ctc::min_frames(target) + static_cast<int>(rng() % 4);
    const ctc::Matrix lp = random_matrix(frames, vocab + 1, rng);
    const auto lg = ctc::loss_and_grad(lp, target);
    ctc::Matrix fd(lp.rows(), lp.cols());
    for (Eigen::Index i = 0; i < lp.size(); ++i) {
      ctc::Matrix up = lp, down = lp;
      up.data()[i] += h;
      down.data()[i] -= h;
      fd.data()[i] = (ctc::loss(up, target) - ctc::loss(down, target)) / (2 * h);
    }
    const double rel = (lg.grad - fd).norm() / std::max(1e-12, fd.norm() + lg.grad.norm());
    CHECK(rel < 1e-3);
  }
}

TEST_CASE("ctc stays finite on extreme log-probabilities") {
  ctc::Matrix lp = ctc::Matrix::Constant(6, 3, -1e4);
  lp.col(0).setConstant(0.0);
  const auto lg = ctc::loss_and_grad(lp, ctc::TokenSeq{1, 2});
  CHECK(std::isfinite(lg.loss));
  CHECK(lg.grad.allFinite());
}

TEST_CASE("ctc graph op agrees with the direct gradient") {
  std::mt19937_64 rng(3);
  const ctc::Matrix lp = random_matrix(5, 4, rng);
  const ctc::TokenSeq target{2, 3};
  nn::Graph g;
  nn::Var x = g.leaf(lp);
  nn::Var l = ctc::loss(x, target);
  g.backward(l);
  const auto lg = ctc::loss_and_grad(lp, target);
  CHECK(l.scalar() == doctest::Approx(lg.loss).epsilon(1e-12));
  CHECK((g.grad(x) - lg.grad).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("collapse and greedy decoding") {
  CHECK(ctc::collapse(std::vector<int>{0, 1, 1, 0, 1, 2, 2, 0}) == ctc::TokenSeq{1, 1, 2});
  CHECK(ctc::collapse(std::vector<int>{0, 0}).empty());
  ctc::Matrix lp = ctc::Matrix::Zero(4, 3);
  lp(0, 1) = lp(1, 1) = lp(2, 0) = lp(3, 2) = 1.0;
  CHECK(ctc::greedy_decode(lp) == ctc::TokenSeq{1, 2});
}

TEST_CASE("edit distance and wer") {
  const ctc::TokenSeq a{1, 2, 3}, b{1, 3}, c{4, 5, 6, 7};
  CHECK(ctc::edit_distance(a, a) == 0);
  CHECK(ctc::edit_distance(a, b) == 1);
  CHECK(ctc::edit_distance(a, c) == 4);
  CHECK(ctc::edit_distance(ctc::TokenSeq{}, a) == 3);
  CHECK(ctc::wer(a, b) == doctest::Approx(1.0 / 3.0));
  CHECK_THROWS_AS(ctc::wer(ctc::TokenSeq{}, a), ConfigError);
}

TEST_CASE("log-probability rows are checked") {
  CHECK_NOTHROW(ctc::check_log_probs(log_softmax(ctc::Matrix::Zero(2, 3))));
  CHECK_THROWS_AS(ctc::check_log_probs(ctc::Matrix::Zero(2, 3)), ConfigError);
}
