#include "intapt/nn/graph.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace intapt::nn {

const Matrix &Var::value() const { return graph_->value(id_); }
bool Var::requires_grad() const { return graph_->requires_grad(id_); }

// --- Gradients --------------------------------------------------------------

void Gradients::accumulate(const Parameter &p, const Matrix &g) {
  auto it = grads_.find(&p);
  if (it == grads_.end()) {
    grads_.emplace(&p, g);
  } else {
    it->second += g;
  }
}

const Matrix *Gradients::find(const Parameter &p) const {
  auto it = grads_.find(&p);
  return it == grads_.end() ? nullptr : &it->second;
}

void Gradients::scale(double factor) {
  for (auto &[p, g] : grads_) g *= factor;
}

double Gradients::global_norm() const {
  double sq = 0.0;
  for (const auto &[p, g] : grads_) sq += g.squaredNorm();
  return std::sqrt(sq);
}

double Gradients::clip_global_norm(double max_norm) {
  const double norm = global_norm();
  if (max_norm > 0.0 && norm > max_norm) scale(max_norm / norm);
  return norm;
}

bool Gradients::all_finite() const {
  for (const auto &[p, g] : grads_) {
    if (!g.allFinite()) return false;
  }
  return true;
}

// --- Graph ------------------------------------------------------------------

void Graph::set_trainable(std::span<const Parameter *const> params) {
  trainable_.clear();
  for (const Parameter *p : params) trainable_.insert(p);
}

void Graph::add_trainable(const Parameter &p) { trainable_.insert(&p); }

Var Graph::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Graph::leaf(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Graph::param(const Parameter &p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return Var(this, it->second);
  const bool trainable = trainable_.contains(&p);
  nodes_.push_back(Node{p.value, {}, {}, trainable, trainable ? &p : nullptr});
  bound_.emplace(&p, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Matrix value, std::initializer_list<Var> inputs, Backward fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Graph::record(Matrix value, std::span<const Var> inputs, Backward fn) {
  bool needs = false;
  for (const Var &v : inputs) {
    if (v.graph_ != this) throw std::logic_error("graph: mixing Vars of different graphs");
    needs = needs || nodes_[v.id_].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : Backward{}, needs, nullptr});
  return Var(this, nodes_.size() - 1);
}

void Graph::accumulate(std::size_t id, const Matrix &g) { accumulate_expr(id, g); }

void Graph::backward(Var loss) {
  if (loss.graph_ != this) throw std::logic_error("graph: loss from another graph");
  for (auto &n : nodes_) n.grad.resize(0, 0);
  Node &root = nodes_[loss.id_];
  if (!root.requires_grad) return;
  root.grad = Matrix::Ones(root.value.rows(), root.value.cols());
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node &n = nodes_[i];
    if (n.grad.size() == 0 || !n.backward) continue;
    n.backward(*this, i);
  }
}

Matrix Graph::grad(Var v) const {
  const Node &n = nodes_[v.id_];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Gradients Graph::parameter_gradients() const {
  Gradients out;
  for (const auto &n : nodes_) {
    if (n.param != nullptr && n.grad.size() != 0) out.accumulate(*n.param, n.grad);
  }
  return out;
}

// --- Operations -------------------------------------------------------------

namespace {

void check_same_shape(const Var &a, const Var &b, const char *op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Graph &g = a.graph();
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(a.value() * b.value(), {a, b}, [ia, ib](Graph &g, std::size_t self) {
    const Matrix &dy = g.node_grad(self);
    if (g.requires_grad(ia)) g.accumulate_expr(ia, dy * g.value(ib).transpose());
    if (g.requires_grad(ib)) g.accumulate_expr(ib, g.value(ia).transpose() * dy);
  });
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: dimension mismatch");
  Graph &g = a.graph();
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(a.value() * b.value().transpose(), {a, b},
                  [ia, ib](Graph &g, std::size_t self) {
                    const Matrix &dy = g.node_grad(self);
                    if (g.requires_grad(ia)) g.accumulate_expr(ia, dy * g.value(ib));
                    if (g.requires_grad(ib)) g.accumulate_expr(ib, dy.transpose() * g.value(ia));
                  });
}

Var add(Var a, Var b) {
  check_same_shape(a, b, "add");
  Graph &g = a.graph();
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(a.value() + b.value(), {a, b}, [ia, ib](Graph &g, std::size_t self) {
    g.accumulate(ia, g.node_grad(self));
    g.accumulate(ib, g.node_grad(self));
  });
}

Var sub(Var a, Var b) {
  check_same_shape(a, b, "sub");
  Graph &g = a.graph();
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(a.value() - b.value(), {a, b}, [ia, ib](Graph &g, std::size_t self) {
    g.accumulate(ia, g.node_grad(self));
    g.accumulate_expr(ib, -g.node_grad(self));
  });
}

Var hadamard(Var a, Var b) {
  check_same_shape(a, b, "hadamard");
  Graph &g = a.graph();
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(a.value().cwiseProduct(b.value()), {a, b},
                  [ia, ib](Graph &g, std::size_t self) {
                    const Matrix &dy = g.node_grad(self);
                    if (g.requires_grad(ia)) g.accumulate_expr(ia, dy.cwiseProduct(g.value(ib)));
                    if (g.requires_grad(ib)) g.accumulate_expr(ib, dy.cwiseProduct(g.value(ia)));
                  });
}

Var scale(Var a, double s) {
  Graph &g = a.graph();
  const std::size_t ia = a.id();
  return g.record(a.value() * s, {a}, [ia, s](Graph &g, std::size_t self) {
    g.accumulate_expr(ia, g.node_grad(self) * s);
  });
}

Var add_scalar(Var a, double s) {
  Graph &g = a.graph();
  const std::size_t ia = a.id();
  return g.record(a.value().array() + s, {a}, [ia](Graph &g, std::size_t self) {
    g.accumulate(ia, g.node_grad(self));
  });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("add_row: expected a 1 x cols row");
  }
  Graph &g = a.graph();
  const std::size_t ia = a.id(), ir = row.id();
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return g.record(std::move(out), {a, row}, [ia, ir](Graph &g, std::size_t self) {
    const Matrix &dy = g.node_grad(self);
    g.accumulate(ia, dy);
    if (g.requires_grad(ir)) g.accumulate_expr(ir, dy.colwise().sum());
  });
}

Var relu(Var a) {
  Graph &g = a.graph();
  const std::size_t ia = a.id();
  return g.record(a.value().cwiseMax(0.0), {a}, [ia](Graph &g, std::size_t self) {
    const Matrix &x = g.value(ia);
    g.accumulate_expr(ia, (x.array() > 0.0).select(g.node_grad(self), 0.0));
  });
}

Var tanh(Var a) {
  Graph &g = a.graph();
  const std::size_t ia = a.id();
  return g.record(a.value().array().tanh().matrix(), {a}, [ia](Graph &g, std::size_t self) {
    const Matrix &y = g.value(self);
    g.accumulate_expr(ia, g.node_grad(self).cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

Var exp(Var a) {
  Graph &g = a.graph();
  const std::size_t ia = a.id();
  return g.record(a.value().array().exp().matrix(), {a}, [ia](Graph &g, std::size_t self) {
    g.accumulate_expr(ia, g.node_grad(self).cwiseProduct(g.value(self)));
  });
}

Var log(Var a) {
  Graph &g = a.graph();
  const std::size_t ia = a.id();
  return g.record(a.value().array().log().matrix(), {a}, [ia](Graph &g, std::size_t self) {
    g.accumulate_expr(ia, g.node_grad(self).cwiseQuotient(g.value(ia)));
  });
}

Var clamp(Var a, double lo, double hi) {
  Graph &g = a.graph();
  const std::size_t ia = a.id();
  return g.record(a.value().cwiseMax(lo).cwiseMin(hi), {a},
                  [ia, lo, hi](Graph &g, std::size_t self) {
                    const Matrix &x = g.value(ia);
                    g.accumulate_expr(
                        ia, (x.array() >= lo && x.array() <= hi).select(g.node_grad(self), 0.0));
                  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Eigen::Index n = x.rows(), d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw std::invalid_argument("layer_norm: gain/bias must be 1 x d");
  }
  auto xhat = std::make_shared<Matrix>(n, d);
  auto inv_std = std::make_shared<Vector>(n);
  const Matrix &xv = x.value();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = xv.row(i).mean();
    const double var = (xv.row(i).array() - mu).square().mean();
    (*inv_std)(i) = 1.0 / std::sqrt(var + eps);
    xhat->row(i) = (xv.row(i).array() - mu) * (*inv_std)(i);
  }
  Matrix out = xhat->array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  Graph &g = x.graph();
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return g.record(std::move(out), {x, gain, bias},
                  [ix, ig, ib, xhat, inv_std](Graph &g, std::size_t self) {
                    const Matrix &dy = g.node_grad(self);
                    if (g.requires_grad(ig)) {
                      g.accumulate_expr(ig, dy.cwiseProduct(*xhat).colwise().sum());
                    }
                    if (g.requires_grad(ib)) g.accumulate_expr(ib, dy.colwise().sum());
                    if (g.requires_grad(ix)) {
                      const auto &gv = g.value(ig);
                      Matrix dxhat = dy.array().rowwise() * gv.row(0).array();
                      const double d = static_cast<double>(dxhat.cols());
                      Matrix dx(dxhat.rows(), dxhat.cols());
                      for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
                        const double m1 = dxhat.row(i).mean();
                        const double m2 = dxhat.row(i).dot(xhat->row(i)) / d;
                        dx.row(i) = (*inv_std)(i) *
                                    (dxhat.row(i).array() - m1 - xhat->row(i).array() * m2).matrix();
                      }
                      g.accumulate(ix, dx);
                    }
                  });
}

namespace {

Matrix softmax_rows_value(const Matrix &a) {
  Matrix out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double m = a.row(i).maxCoeff();
    out.row(i) = (a.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

// dS = A .* (dA - rowsum(dA .* A))
Matrix softmax_rows_backward(const Matrix &prob, const Matrix &dy) {
  Vector dots = dy.cwiseProduct(prob).rowwise().sum();
  return prob.cwiseProduct(dy - dots.replicate(1, dy.cols()));
}

}  // namespace

Var softmax_rows(Var a) {
  Graph &g = a.graph();
  const std::size_t ia = a.id();
  return g.record(softmax_rows_value(a.value()), {a}, [ia](Graph &g, std::size_t self) {
    g.accumulate(ia, softmax_rows_backward(g.value(self), g.node_grad(self)));
  });
}

Var log_softmax_rows(Var a) {
  const Matrix &v = a.value();
  Matrix out(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const double m = v.row(i).maxCoeff();
    const double lse = m + std::log((v.row(i).array() - m).exp().sum());
    out.row(i) = v.row(i).array() - lse;
  }
  Graph &g = a.graph();
  const std::size_t ia = a.id();
  return g.record(std::move(out), {a}, [ia](Graph &g, std::size_t self) {
    const Matrix &dy = g.node_grad(self);
    Matrix prob = g.value(self).array().exp();
    Vector sums = dy.rowwise().sum();
    g.accumulate_expr(ia, dy - prob.cwiseProduct(sums.replicate(1, dy.cols())));
  });
}

Var attention(Var q, Var k, Var v, int n_heads) {
  const Eigen::Index tq = q.rows(), tk = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != tk || n_heads <= 0 || d % n_heads != 0) {
    throw std::invalid_argument("attention: incompatible shapes");
  }
  const Eigen::Index dk = d / n_heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dk));
  auto probs = std::make_shared<std::vector<Matrix>>(n_heads);
  Matrix out(tq, d);
  for (int h = 0; h < n_heads; ++h) {
    const auto qh = q.value().middleCols(h * dk, dk);
    const auto kh = k.value().middleCols(h * dk, dk);
    const auto vh = v.value().middleCols(h * dk, dk);
    Matrix scores = (qh * kh.transpose()) * s;
    (*probs)[h] = softmax_rows_value(scores);
    out.middleCols(h * dk, dk).noalias() = (*probs)[h] * vh;
  }
  Graph &g = q.graph();
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return g.record(std::move(out), {q, k, v},
                  [iq, ik, iv, probs, n_heads, dk, s](Graph &g, std::size_t self) {
                    const Matrix &dy = g.node_grad(self);
                    const Matrix &qv = g.value(iq), &kv = g.value(ik), &vv = g.value(iv);
                    Matrix dq = Matrix::Zero(qv.rows(), qv.cols());
                    Matrix dkm = Matrix::Zero(kv.rows(), kv.cols());
                    Matrix dv = Matrix::Zero(vv.rows(), vv.cols());
                    for (int h = 0; h < n_heads; ++h) {
                      const Matrix &a = (*probs)[h];
                      const auto dyh = dy.middleCols(h * dk, dk);
                      Matrix da = dyh * vv.middleCols(h * dk, dk).transpose();
                      dv.middleCols(h * dk, dk).noalias() = a.transpose() * dyh;
                      Matrix ds = softmax_rows_backward(a, da) * s;
                      dq.middleCols(h * dk, dk).noalias() = ds * kv.middleCols(h * dk, dk);
                      dkm.middleCols(h * dk, dk).noalias() = ds.transpose() * qv.middleCols(h * dk, dk);
                    }
                    g.accumulate(iq, dq);
                    g.accumulate(ik, dkm);
                    g.accumulate(iv, dv);
                  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const Var &p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const Var &p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.rows();
  }
  Graph &g = parts[0].graph();
  return g.record(std::move(out), parts, [spans](Graph &g, std::size_t self) {
    const Matrix &dy = g.node_grad(self);
    for (const auto &[id, begin] : spans) {
      if (g.requires_grad(id)) g.accumulate_expr(id, dy.middleRows(begin, g.value(id).rows()));
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var &p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const Var &p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.cols();
  }
  Graph &g = parts[0].graph();
  return g.record(std::move(out), parts, [spans](Graph &g, std::size_t self) {
    const Matrix &dy = g.node_grad(self);
    for (const auto &[id, begin] : spans) {
      if (g.requires_grad(id)) g.accumulate_expr(id, dy.middleCols(begin, g.value(id).cols()));
    }
  });
}

Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) {
    throw std::out_of_range("slice_rows: range outside matrix");
  }
  Graph &g = a.graph();
  const std::size_t ia = a.id();
  const Eigen::Index rows = a.rows();
  return g.record(a.value().middleRows(begin, count), {a},
                  [ia, begin, count, rows](Graph &g, std::size_t self) {
                    Matrix d = Matrix::Zero(rows, g.value(ia).cols());
                    d.middleRows(begin, count) = g.node_grad(self);
                    g.accumulate(ia, d);
                  });
}

Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) {
    throw std::out_of_range("slice_cols: range outside matrix");
  }
  Graph &g = a.graph();
  const std::size_t ia = a.id();
  const Eigen::Index cols = a.cols();
  return g.record(a.value().middleCols(begin, count), {a},
                  [ia, begin, count, cols](Graph &g, std::size_t self) {
                    Matrix d = Matrix::Zero(g.value(ia).rows(), cols);
                    d.middleCols(begin, count) = g.node_grad(self);
                    g.accumulate(ia, d);
                  });
}

Var gather_rows(Var a, std::span<const int> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw std::out_of_range("gather_rows: bad index");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  Graph &g = a.graph();
  const std::size_t ia = a.id();
  std::vector<int> idx(rows.begin(), rows.end());
  return g.record(std::move(out), {a}, [ia, idx](Graph &g, std::size_t self) {
    const Matrix &dy = g.node_grad(self);
    Matrix d = Matrix::Zero(g.value(ia).rows(), g.value(ia).cols());
    for (std::size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += dy.row(static_cast<Eigen::Index>(i));
    g.accumulate(ia, d);
  });
}

Var mean_rows(Var a) {
  if (a.rows() == 0) throw std::invalid_argument("mean_rows: empty input");
  Graph &g = a.graph();
  const std::size_t ia = a.id();
  const double n = static_cast<double>(a.rows());
  return g.record(a.value().colwise().mean(), {a}, [ia, n](Graph &g, std::size_t self) {
    g.accumulate_expr(ia, g.node_grad(self).replicate(g.value(ia).rows(), 1) / n);
  });
}

Var sum(Var a) {
  Graph &g = a.graph();
  const std::size_t ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return g.record(std::move(out), {a}, [ia](Graph &g, std::size_t self) {
    const double d = g.node_grad(self)(0, 0);
    g.accumulate_expr(ia, Matrix::Constant(g.value(ia).rows(), g.value(ia).cols(), d));
  });
}

Var mean(Var a) {
  if (a.value().size() == 0) throw std::invalid_argument("mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var log_mean_exp(Var a) {
  const Matrix &v = a.value();
  if (v.size() == 0) throw std::invalid_argument("log_mean_exp: empty input");
  const double m = v.maxCoeff();
  const double s = (v.array() - m).exp().sum();
  Matrix out(1, 1);
  out(0, 0) = m + std::log(s / static_cast<double>(v.size()));
  Graph &g = a.graph();
  const std::size_t ia = a.id();
  return g.record(std::move(out), {a}, [ia](Graph &g, std::size_t self) {
    const Matrix &x = g.value(ia);
    const double m = x.maxCoeff();
    Matrix w = (x.array() - m).exp();
    w /= w.sum();
    g.accumulate_expr(ia, w * g.node_grad(self)(0, 0));
  });
}

Var pick(Var a, Eigen::Index r, Eigen::Index c) {
  if (r < 0 || c < 0 || r >= a.rows() || c >= a.cols()) throw std::out_of_range("pick: index");
  Matrix out(1, 1);
  out(0, 0) = a.value()(r, c);
  Graph &g = a.graph();
  const std::size_t ia = a.id();
  return g.record(std::move(out), {a}, [ia, r, c](Graph &g, std::size_t self) {
    Matrix d = Matrix::Zero(g.value(ia).rows(), g.value(ia).cols());
    d(r, c) = g.node_grad(self)(0, 0);
    g.accumulate(ia, d);
  });
}

Var mse(Var a, Var b) {
  Var diff = sub(a, b);
  return mean(hadamard(diff, diff));
}

Var cross_entropy(Var logits, int label) {
  if (logits.rows() != 1 || label < 0 || label >= logits.cols()) {
    throw std::invalid_argument("cross_entropy: expected 1 x K logits and a valid label");
  }
  return scale(pick(log_softmax_rows(logits), 0, label), -1.0);
}

}  // namespace intapt::nn
