#pragma once

#include "intapt/nn/layers.hpp"

namespace intapt::nn {

struct AdamWOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.005;
  /// Global-norm clip applied before the update; <= 0 disables.
  double clip_norm = 5.0;
};

/// AdamW with decoupled weight decay. Parameters that received no gradient
/// in a step are left untouched (no decay either).
class AdamW {
 public:
  AdamW(ParameterList params, AdamWOptions options);

  /// Applies one update. Returns the gradient norm before clipping.
  /// Throws StageError on a non-finite gradient.
  double step(Gradients grads);

  long steps() const { return step_; }
  const AdamWOptions &options() const { return options_; }

 private:
  ParameterList params_;
  AdamWOptions options_;
  std::vector<Matrix> first_;
  std::vector<Matrix> second_;
  std::vector<long> updates_;
  long step_ = 0;
};

}  // namespace intapt::nn
