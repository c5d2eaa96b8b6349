#pragma once

#include "intapt/nn/graph.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace intapt::nn {

using Rng = std::mt19937_64;

/// Ordered view over a model's parameters. Order is part of the fingerprint
/// and checkpoint layout, so it is fixed by construction order.
using ParameterList = std::vector<Parameter *>;
using ConstParameterList = std::vector<const Parameter *>;

ConstParameterList as_const(const ParameterList &params);
std::size_t count_parameters(const ConstParameterList &params);

/// y = x W + b, with W stored in x out.
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in, int out, Rng &rng, double init_gain = 1.0);

  Var operator()(Graph &g, Var x) const;
  void collect(ParameterList &out);
  void collect(ConstParameterList &out) const;
  int in_dim() const { return static_cast<int>(weight_.value.rows()); }
  int out_dim() const { return static_cast<int>(weight_.value.cols()); }
  Parameter &weight() { return weight_; }
  Parameter &bias() { return bias_; }

 private:
  Parameter weight_;
  Parameter bias_;
};

/// Stack of Linear layers with ReLU between them (none after the last).
class Mlp {
 public:
  Mlp() = default;
  /// dims = {in, hidden..., out}; dims.size() - 1 layers.
  Mlp(std::string name, const std::vector<int> &dims, Rng &rng, double last_gain = 1.0);

  Var operator()(Graph &g, Var x) const;
  void collect(ParameterList &out);
  void collect(ConstParameterList &out) const;
  std::size_t depth() const { return layers_.size(); }
  int in_dim() const { return layers_.front().in_dim(); }
  int out_dim() const { return layers_.back().out_dim(); }

 private:
  std::vector<Linear> layers_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(std::string name, int dim);

  Var operator()(Graph &g, Var x) const;
  void collect(ParameterList &out);
  void collect(ConstParameterList &out) const;

 private:
  Parameter gain_;
  Parameter bias_;
};

/// Pre-norm transformer encoder layer:
///   x += MHA(LN(x)); x += FFN(LN(x))
class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(std::string name, int d_model, int n_heads, int d_ff, Rng &rng);

  Var operator()(Graph &g, Var x) const;
  void collect(ParameterList &out);
  void collect(ConstParameterList &out) const;
  int d_model() const { return query_.in_dim(); }
  int n_heads() const { return n_heads_; }

 private:
  int n_heads_ = 1;
  LayerNorm norm_attn_;
  Linear query_, key_, value_, output_;
  LayerNorm norm_ff_;
  Linear ff_in_, ff_out_;
};

/// Fixed sinusoidal encodings for absolute positions [offset, offset + n).
Matrix sinusoidal_positions(Eigen::Index n, int d_model, Eigen::Index offset = 0);

}  // namespace intapt::nn
