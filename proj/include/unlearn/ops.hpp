// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string_view>
#include <vector>

#include "unlearn/tape.hpp"
#include "unlearn/tensor.hpp"

namespace unlearn::ad {

// Per-channel batch-norm running statistics. Updated by train-mode forward
// (exponential moving average), read by eval-mode forward. Lives on the
// model, outside any tape.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;

  static BatchNormState init(std::size_t channels, double momentum = 0.1);
};

// Every op computes eagerly and records itself on `tape` when the tape is
// non-null and any input requires grad. Null tape = pure evaluation.

Tensor relu(const Tensor& x, Tape* tape = nullptr);
Tensor tanh_act(const Tensor& x, Tape* tape = nullptr);
Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor scalar_mul(const Tensor& x, double c, Tape* tape = nullptr);
// x:[B,I] w:[O,I] b:[O] -> [B,O]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b, Tape* tape = nullptr);
// x:[B,Cin,L] kernel:[Cout,Cin,K] bias:[Cout] -> [B,Cout,Lo], cross-correlation
Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              std::size_t stride, std::size_t padding, Tape* tape = nullptr);
// [B,C,L] -> [B,C]
Tensor global_avg_pool(const Tensor& x, Tape* tape = nullptr);
// elementwise band clamp; differentiable w.r.t. x only
Tensor clamp(const Tensor& x, const Tensor& lo, const Tensor& hi, Tape* tape = nullptr);
Tensor clamp_scalar(const Tensor& x, double lo, double hi, Tape* tape = nullptr);
// sign(0) = 0; gradient is zero everywhere
Tensor sign(const Tensor& x, Tape* tape = nullptr);
// row-wise, max-subtraction stabilized; [B,C] -> [B,C]
Tensor softmax(const Tensor& logits, Tape* tape = nullptr);
// mean over batch of -log softmax(logits)[label]
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                             Tape* tape = nullptr);
// mean over batch of sum_i t_i log(t_i / s_i); student floor 1e-12
Tensor kl_divergence(const Tensor& teacher_probs, const Tensor& student_probs,
                     Tape* tape = nullptr);
// x:[B,C,L]; train mode normalizes by batch statistics and updates `state`,
// eval mode normalizes by `state`
Tensor batch_norm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    BatchNormState& state, double eps, bool train,
                    Tape* tape = nullptr);
Tensor reshape(const Tensor& x, Shape new_shape, Tape* tape = nullptr);
// [B,C,L] -> [B,C,L*factor], nearest neighbor
Tensor upsample_nearest(const Tensor& x, std::size_t factor, Tape* tape = nullptr);
// distance between L2-normalized channel-energy maps of two activations
// [B,C,L]; zero-norm maps contribute 0
Tensor attention_pair_loss(const Tensor& teacher_act, const Tensor& student_act,
                           Tape* tape = nullptr);

// Dispatcher over the basic elementwise/structural kinds:
//   relu, add, scalar_mul, linear, global_avg_pool, clamp, sign
// clamp accepts either (x, lo, hi) tensors or (x) plus attrs {lo, hi}.
Tensor primitive_forward(std::string_view kind, const std::vector<Tensor>& inputs,
                         const std::vector<double>& attrs, Tape* tape = nullptr);

constexpr double kKlProbFloor = 1e-12;

}  // namespace unlearn::ad
