#pragma once

#include <vector>

#include "smoothtail/autograd.hpp"

namespace smoothtail {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double max_grad_norm = 0.1;  // <= 0 disables clipping
};

// Decoupled weight decay Adam. Only parameters flagged trainable are touched;
// everything else stays bit-identical. State is keyed by parameter position,
// so the parameter list must keep its layout between steps.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  /// Applies one update from the accumulated gradients, then clears them.
  /// Returns the global gradient norm before clipping.
  double step(std::vector<Parameter>& params, double lr);

  int steps_taken() const { return steps_; }

 private:
  AdamWConfig config_;
  std::vector<Matrix> first_moment_;
  std::vector<Matrix> second_moment_;
  int steps_ = 0;
};

/// Multiplies every allocated gradient of a trainable parameter by `factor`.
void scale_gradients(std::vector<Parameter>& params, float factor);

}  // namespace smoothtail
