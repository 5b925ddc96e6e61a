// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "unlearn/tensor.hpp"

namespace unlearn::ad {

// SGD with classical momentum: v <- momentum*v + g; p <- p - lr*v.
// Velocity buffers persist across steps for the lifetime of the optimizer.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor> params, double lr, double momentum = 0.9);

  void step();
  void zero_grad();

  double lr() const { return lr_; }
  void set_lr(double lr);

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double lr_;
  double momentum_;
};

// Single functional update over (params, grads); momentum buffers are the
// caller's to keep.
void sgd_step(std::vector<Tensor>& params, std::vector<std::vector<double>>& velocity,
              double lr, double momentum);

}  // namespace unlearn::ad
