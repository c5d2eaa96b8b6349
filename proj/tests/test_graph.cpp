#include "fixtures.hpp"
#include "intapt/error.hpp"
#include "intapt/hash.hpp"
#include "intapt/nn/archive.hpp"
#include "intapt/nn/layers.hpp"
#include "intapt/nn/optim.hpp"

#include <doctest.h>

#include <functional>

using namespace intapt;
using intapt::testing::random_matrix;
using nn::Graph;
using nn::Matrix;
using nn::Var;

namespace {

using Op = std::function<Var(Graph &, Var)>;

/// Scalarises op(x) with fixed random weights, so every output element
/// contributes to the checked gradient.
double evaluate(const Op &op, const Matrix &x, const Matrix &w, Matrix *grad = nullptr) {
  Graph g;
  Var in = g.leaf(x);
  Var out = op(g, in);
  REQUIRE(out.rows() == w.rows());
  REQUIRE(out.cols() == w.cols());
  Var s = nn::sum(nn::hadamard(out, g.constant(w)));
  if (grad) {
    g.backward(s);
    *grad = g.grad(in);
  }
  return s.scalar();
}

double max_fd_error(const Op &op, const Matrix &x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Graph probe;
  const Var shape = op(probe, probe.constant(x));
  const Matrix w = random_matrix(shape.rows(), shape.cols(), rng);
  Matrix analytic;
  evaluate(op, x, w, &analytic);
  const double h = 1e-5;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Matrix up = x, down = x;
    up.data()[i] += h;
    down.data()[i] -= h;
    const double fd = (evaluate(op, up, w) - evaluate(op, down, w)) / (2 * h);
    const double err = std::abs(fd - analytic.data()[i]) / std::max(1.0, std::abs(fd));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace

TEST_CASE("graph ops match finite differences") {
  std::mt19937_64 rng(21);
  const Matrix x = random_matrix(4, 6, rng);
  const Matrix b = random_matrix(6, 3, rng);
  const Matrix row = random_matrix(1, 6, rng);
  const Matrix other = random_matrix(4, 6, rng);
  const Matrix gain = random_matrix(1, 6, rng);
  const std::vector<int> rows{3, 0, 0, 2};

  const std::vector<std::pair<std::string, Op>> ops = {
      {"matmul", [&](Graph &g, Var v) { return nn::matmul(v, g.constant(b)); }},
      {"matmul_nt", [&](Graph &g, Var v) { return nn::matmul_nt(v, g.constant(other)); }},
      {"add", [&](Graph &g, Var v) { return nn::add(v, g.constant(other)); }},
      {"sub", [&](Graph &g, Var v) { return nn::sub(g.constant(other), v); }},
      {"hadamard", [&](Graph &, Var v) { return nn::hadamard(v, v); }},
      {"scale", [&](Graph &, Var v) { return nn::scale(v, -1.7); }},
      {"add_row", [&](Graph &g, Var v) { return nn::add_row(v, g.constant(row)); }},
      {"add_row bias", [&](Graph &g, Var v) { return nn::add_row(g.constant(other), nn::slice_rows(v, 0, 1)); }},
      {"relu", [&](Graph &, Var v) { return nn::relu(v); }},
      {"tanh", [&](Graph &, Var v) { return nn::tanh(v); }},
      {"exp", [&](Graph &, Var v) { return nn::exp(v); }},
      {"log", [&](Graph &, Var v) { return nn::log(nn::add_scalar(nn::hadamard(v, v), 0.5)); }},
      {"layer_norm", [&](Graph &g, Var v) { return nn::layer_norm(v, g.constant(gain), g.constant(row)); }},
      {"softmax_rows", [&](Graph &, Var v) { return nn::softmax_rows(v); }},
      {"log_softmax_rows", [&](Graph &, Var v) { return nn::log_softmax_rows(v); }},
      {"attention", [&](Graph &, Var v) { return nn::attention(v, nn::scale(v, 0.5), nn::tanh(v), 2); }},
      {"concat_rows", [&](Graph &g, Var v) { std::vector<Var> p{v, g.constant(other), v}; return nn::concat_rows(p); }},
      {"concat_cols", [&](Graph &g, Var v) { std::vector<Var> p{g.constant(other), v}; return nn::concat_cols(p); }},
      {"slice_rows", [&](Graph &, Var v) { return nn::slice_rows(v, 1, 2); }},
      {"slice_cols", [&](Graph &, Var v) { return nn::slice_cols(v, 2, 3); }},
      {"gather_rows", [&](Graph &, Var v) { return nn::gather_rows(v, rows); }},
      {"mean_rows", [&](Graph &, Var v) { return nn::mean_rows(v); }},
      {"mean", [&](Graph &, Var v) { return nn::mean(v); }},
      {"log_mean_exp", [&](Graph &, Var v) { return nn::log_mean_exp(nn::scale(v, 3.0)); }},
      {"pick", [&](Graph &, Var v) { return nn::pick(v, 2, 3); }},
      {"mse", [&](Graph &g, Var v) { return nn::mse(v, g.constant(other)); }},
      {"cross_entropy", [&](Graph &, Var v) { return nn::cross_entropy(nn::slice_rows(v, 1, 1), 4); }},
  };
  for (const auto &[name, op] : ops) {
    CAPTURE(name);
    CHECK(max_fd_error(op, x, 99) < 1e-6);
  }
}

TEST_CASE("clamp has zero gradient where active") {
  Graph g;
  Matrix x(1, 3);
  x << -5.0, 0.2, 5.0;
  Var v = g.leaf(x);
  g.backward(nn::sum(nn::clamp(v, -1.0, 1.0)));
  const Matrix grad = g.grad(v);
  CHECK(grad(0, 0) == 0.0);
  CHECK(grad(0, 1) == 1.0);
  CHECK(grad(0, 2) == 0.0);
}

TEST_CASE("log_mean_exp is stable for large inputs") {
  Graph g;
  Var v = g.leaf(Matrix::Constant(3, 1, 800.0));
  CHECK(nn::log_mean_exp(v).scalar() == doctest::Approx(800.0));
}

TEST_CASE("only trainable parameters receive gradients") {
  nn::Parameter a{"a", Matrix::Ones(2, 2)}, b{"b", Matrix::Ones(2, 2)};
  Graph g;
  g.add_trainable(a);
  Var loss = nn::sum(nn::hadamard(g.param(a), g.param(b)));
  g.backward(loss);
  const nn::Gradients grads = g.parameter_gradients();
  CHECK(grads.size() == 1);
  CHECK(grads.find(a) != nullptr);
  CHECK(grads.find(b) == nullptr);
  CHECK_FALSE(g.param(b).requires_grad());
}

TEST_CASE("gradient clipping bounds the global norm") {
  nn::Parameter a{"a", Matrix::Zero(1, 2)};
  nn::Gradients grads;
  grads.accumulate(a, (Matrix(1, 2) << 30.0, 40.0).finished());
  CHECK(grads.clip_global_norm(5.0) == doctest::Approx(50.0));
  CHECK(grads.global_norm() == doctest::Approx(5.0));
}

TEST_CASE("adamw leaves untouched parameters alone and rejects non-finite gradients") {
  nn::Parameter a{"a", Matrix::Ones(1, 2)}, b{"b", Matrix::Ones(1, 2)};
  nn::AdamW opt({&a, &b}, nn::AdamWOptions{});
  nn::Gradients grads;
  grads.accumulate(a, Matrix::Ones(1, 2));
  opt.step(grads);
  CHECK((a.value.array() < 1.0).all());
  CHECK(b.value == Matrix::Ones(1, 2));
  nn::Gradients bad;
  bad.accumulate(a, Matrix::Constant(1, 2, std::numeric_limits<double>::quiet_NaN()));
  CHECK_THROWS_AS(opt.step(bad), StageError);
}

TEST_CASE("archives round-trip and fingerprints track values") {
  intapt::testing::TempDir dir("archive");
  nn::Rng rng(4);
  nn::Mlp mlp("m", {3, 5, 2}, rng);
  nn::ConstParameterList params;
  mlp.collect(params);
  const std::string fp = nn::fingerprint(params);
  const auto path = dir.path() / "m.bin";
  nn::write_archive(path, "mlp", {{"note", 1}}, params);

  nn::Rng other(5);
  nn::Mlp copy("m", {3, 5, 2}, other);
  nn::ParameterList mut;
  copy.collect(mut);
  CHECK(nn::fingerprint(nn::as_const(mut)) != fp);
  const nn::Archive a = nn::read_archive(path, "mlp");
  CHECK(a.meta.at("note") == 1);
  nn::assign(a, mut);
  CHECK(nn::fingerprint(nn::as_const(mut)) == fp);
  CHECK_THROWS_AS(nn::read_archive(path, "other"), StageError);
}

TEST_CASE("sha256 and seed mixing") {
  CHECK(sha256_hex("abc") ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(mix_seed(1, 2) == mix_seed(1, 2));
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
}
