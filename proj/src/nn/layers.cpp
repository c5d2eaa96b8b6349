#include "intapt/nn/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace intapt::nn {

ConstParameterList as_const(const ParameterList &params) {
  return ConstParameterList(params.begin(), params.end());
}

std::size_t count_parameters(const ConstParameterList &params) {
  std::size_t n = 0;
  for (const Parameter *p : params) n += static_cast<std::size_t>(p->value.size());
  return n;
}

// Glorot-uniform weights, zero bias.
Linear::Linear(std::string name, int in, int out, Rng &rng, double init_gain) {
  if (in <= 0 || out <= 0) throw std::invalid_argument("Linear: dimensions must be positive");
  const double limit = init_gain * std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  weight_.name = name + ".weight";
  weight_.value.resize(in, out);
  for (Eigen::Index j = 0; j < out; ++j) {
    for (Eigen::Index i = 0; i < in; ++i) weight_.value(i, j) = dist(rng);
  }
  bias_.name = name + ".bias";
  bias_.value = Matrix::Zero(1, out);
}

Var Linear::operator()(Graph &g, Var x) const {
  return add_row(matmul(x, g.param(weight_)), g.param(bias_));
}

void Linear::collect(ParameterList &out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

void Linear::collect(ConstParameterList &out) const {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

Mlp::Mlp(std::string name, const std::vector<int> &dims, Rng &rng, double last_gain) {
  if (dims.size() < 2) throw std::invalid_argument("Mlp: need at least in and out dims");
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const bool last = i + 2 == dims.size();
    layers_.emplace_back(name + "." + std::to_string(i), dims[i], dims[i + 1], rng,
                         last ? last_gain : 1.0);
  }
}

Var Mlp::operator()(Graph &g, Var x) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i](g, x);
    if (i + 1 < layers_.size()) x = relu(x);
  }
  return x;
}

void Mlp::collect(ParameterList &out) {
  for (auto &l : layers_) l.collect(out);
}

void Mlp::collect(ConstParameterList &out) const {
  for (const auto &l : layers_) l.collect(out);
}

LayerNorm::LayerNorm(std::string name, int dim) {
  gain_.name = name + ".gain";
  gain_.value = Matrix::Ones(1, dim);
  bias_.name = name + ".bias";
  bias_.value = Matrix::Zero(1, dim);
}

Var LayerNorm::operator()(Graph &g, Var x) const {
  return layer_norm(x, g.param(gain_), g.param(bias_));
}

void LayerNorm::collect(ParameterList &out) {
  out.push_back(&gain_);
  out.push_back(&bias_);
}

void LayerNorm::collect(ConstParameterList &out) const {
  out.push_back(&gain_);
  out.push_back(&bias_);
}

TransformerLayer::TransformerLayer(std::string name, int d_model, int n_heads, int d_ff,
                                   Rng &rng)
    : n_heads_(n_heads),
      norm_attn_(name + ".norm_attn", d_model),
      query_(name + ".query", d_model, d_model, rng),
      key_(name + ".key", d_model, d_model, rng),
      value_(name + ".value", d_model, d_model, rng),
      output_(name + ".output", d_model, d_model, rng),
      norm_ff_(name + ".norm_ff", d_model),
      ff_in_(name + ".ff_in", d_model, d_ff, rng),
      ff_out_(name + ".ff_out", d_ff, d_model, rng) {
  if (n_heads <= 0 || d_model % n_heads != 0) {
    throw std::invalid_argument("TransformerLayer: d_model must be divisible by n_heads");
  }
}

Var TransformerLayer::operator()(Graph &g, Var x) const {
  Var n = norm_attn_(g, x);
  Var att = attention(query_(g, n), key_(g, n), value_(g, n), n_heads_);
  x = add(x, output_(g, att));
  Var f = ff_out_(g, relu(ff_in_(g, norm_ff_(g, x))));
  return add(x, f);
}

void TransformerLayer::collect(ParameterList &out) {
  norm_attn_.collect(out);
  query_.collect(out);
  key_.collect(out);
  value_.collect(out);
  output_.collect(out);
  norm_ff_.collect(out);
  ff_in_.collect(out);
  ff_out_.collect(out);
}

void TransformerLayer::collect(ConstParameterList &out) const {
  norm_attn_.collect(out);
  query_.collect(out);
  key_.collect(out);
  value_.collect(out);
  output_.collect(out);
  norm_ff_.collect(out);
  ff_in_.collect(out);
  ff_out_.collect(out);
}

Matrix sinusoidal_positions(Eigen::Index n, int d_model, Eigen::Index offset) {
  Matrix pe(n, d_model);
  for (Eigen::Index t = 0; t < n; ++t) {
    const double pos = static_cast<double>(t + offset);
    for (int i = 0; i < d_model; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d_model);
      pe(t, i) = (i % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
    }
  }
  return pe;
}

}  // namespace intapt::nn
