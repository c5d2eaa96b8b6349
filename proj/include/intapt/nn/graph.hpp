#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// A Graph records every operation applied to its Vars; backward() walks the
// record in reverse. Model parameters are never mutated by a Graph: they are
// bound either as constants or, when registered trainable, as leaves whose
// gradients are collected into a Gradients map afterwards.

#include <Eigen/Dense>

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace intapt::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

struct Parameter {
  std::string name;
  Matrix value;
};

class Graph;

class Var {
 public:
  Var() = default;

  const Matrix &value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  bool valid() const { return graph_ != nullptr; }
  bool requires_grad() const;
  Graph &graph() const { return *graph_; }
  std::size_t id() const { return id_; }

 private:
  friend class Graph;
  Var(Graph *g, std::size_t id) : graph_(g), id_(id) {}
  Graph *graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Parameter gradients collected from one or more backward passes.
class Gradients {
 public:
  void accumulate(const Parameter &p, const Matrix &g);
  const Matrix *find(const Parameter &p) const;
  bool empty() const { return grads_.empty(); }
  std::size_t size() const { return grads_.size(); }
  void scale(double factor);
  double global_norm() const;
  /// Rescales so that the global L2 norm is at most max_norm; returns the
  /// norm before clipping.
  double clip_global_norm(double max_norm);
  bool all_finite() const;

 private:
  std::unordered_map<const Parameter *, Matrix> grads_;
};

class Graph {
 public:
  using Backward = std::function<void(Graph &, std::size_t self)>;

  Graph() = default;
  Graph(const Graph &) = delete;
  Graph &operator=(const Graph &) = delete;

  /// Parameters registered here accumulate gradients; all others bind as
  /// constants.
  void set_trainable(std::span<const Parameter *const> params);
  void add_trainable(const Parameter &p);

  Var constant(Matrix value);
  /// A leaf whose gradient is retained (e.g. a prompt under test).
  Var leaf(Matrix value);
  Var param(const Parameter &p);

  /// Records a new node. `inputs` decide whether it requires a gradient;
  /// `fn` is only kept if so.
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward fn);
  Var record(Matrix value, std::span<const Var> inputs, Backward fn);

  void backward(Var loss);
  /// Gradient of the last backward() w.r.t. a node (zero matrix if none).
  Matrix grad(Var v) const;
  Gradients parameter_gradients() const;

  std::size_t size() const { return nodes_.size(); }

  // Used by op implementations.
  const Matrix &value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  void accumulate(std::size_t id, const Matrix &g);
  template <typename Expr>
  void accumulate_expr(std::size_t id, const Expr &g) {
    Node &n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }
  const Matrix &node_grad(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool requires_grad = false;
    const Parameter *param = nullptr;
  };

  std::deque<Node> nodes_;
  std::unordered_set<const Parameter *> trainable_;
  std::unordered_map<const Parameter *, std::size_t> bound_;
};

// ---------------------------------------------------------------------------
// Operations. All take and return Vars of the same Graph.

Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// Adds a 1 x n row to every row of a (bias broadcast).
Var add_row(Var a, Var row);
Var relu(Var a);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);
/// Clamps elementwise; gradient is zero where the clamp is active.
Var clamp(Var a, double lo, double hi);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
/// Fused multi-head scaled dot-product attention over T x d inputs.
Var attention(Var q, Var k, Var v, int n_heads);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count);
/// Picks rows by index (repetition allowed).
Var gather_rows(Var a, std::span<const int> rows);
Var mean_rows(Var a);
Var sum(Var a);
Var mean(Var a);
/// log(mean(exp(a))) over all elements, computed stably.
Var log_mean_exp(Var a);
Var pick(Var a, Eigen::Index r, Eigen::Index c);
/// Mean squared difference over all elements.
Var mse(Var a, Var b);
/// -log softmax(logits)[label] for a 1 x K row.
Var cross_entropy(Var logits, int label);

}  // namespace intapt::nn
