#include "intapt/nn/optim.hpp"

#include "intapt/error.hpp"

#include <cmath>

namespace intapt::nn {

AdamW::AdamW(ParameterList params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  if (options_.learning_rate <= 0.0) throw ConfigError("AdamW: learning rate must be > 0");
  for (const Parameter *p : params_) {
    first_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    second_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    updates_.push_back(0);
  }
}

double AdamW::step(Gradients grads) {
  if (!grads.all_finite()) throw StageError("AdamW: non-finite gradient");
  const double norm = grads.clip_global_norm(options_.clip_norm);
  ++step_;
  const double lr = options_.learning_rate;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter &p = *params_[i];
    const Matrix *g = grads.find(p);
    if (g == nullptr) continue;
    const long t = ++updates_[i];
    p.value *= 1.0 - lr * options_.weight_decay;
    first_[i] = options_.beta1 * first_[i] + (1.0 - options_.beta1) * (*g);
    second_[i] = options_.beta2 * second_[i] + (1.0 - options_.beta2) * g->cwiseAbs2();
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t));
    p.value.array() -= lr * (first_[i].array() / bc1) /
                       ((second_[i].array() / bc2).sqrt() + options_.eps);
  }
  return norm;
}

}  // namespace intapt::nn
