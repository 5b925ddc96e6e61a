// SPDX-License-Identifier: Apache-2.0
#include "unlearn/optim.hpp"

#include <stdexcept>

namespace unlearn::ad {

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, double lr, double momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
  if (lr_ < 0.0) throw std::invalid_argument("sgd: negative learning rate");
  if (momentum_ < 0.0 || momentum_ >= 1.0)
    throw std::invalid_argument("sgd: momentum must be in [0, 1)");
  velocity_.reserve(params_.size());
  for (const Tensor& p : params_) velocity_.emplace_back(p.numel(), 0.0);
}

void SgdOptimizer::set_lr(double lr) {
  if (lr < 0.0) throw std::invalid_argument("sgd: negative learning rate");
  lr_ = lr;
}

void SgdOptimizer::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) throw std::runtime_error("sgd: missing gradient for parameter");
    auto g = p.grad();
    auto d = p.data();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < d.size(); ++j) {
      v[j] = momentum_ * v[j] + g[j];
      d[j] -= lr_ * v[j];
    }
    p.check_finite("sgd-updated parameter");
  }
}

void SgdOptimizer::zero_grad() {
  for (Tensor& p : params_) {
    p.ensure_grad();
    p.zero_grad();
  }
}

void sgd_step(std::vector<Tensor>& params, std::vector<std::vector<double>>& velocity,
              double lr, double momentum) {
  if (velocity.size() != params.size())
    throw std::invalid_argument("sgd_step: velocity buffer count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.has_grad()) throw std::runtime_error("sgd: missing gradient for parameter");
    auto g = p.grad();
    auto d = p.data();
    auto& v = velocity[i];
    if (v.size() != d.size()) throw std::invalid_argument("sgd_step: velocity shape mismatch");
    for (std::size_t j = 0; j < d.size(); ++j) {
      v[j] = momentum * v[j] + g[j];
      d[j] -= lr * v[j];
    }
    p.check_finite("sgd-updated parameter");
  }
}

}  // namespace unlearn::ad
