// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "unlearn/tensor.hpp"

namespace unlearn::ad {

enum class OpKind {
  Relu,
  Tanh,
  Add,
  ScalarMul,
  Linear,
  Conv1d,
  GlobalAvgPool,
  Clamp,
  ClampScalar,
  Sign,
  Softmax,
  SoftmaxXent,
  KlDiv,
  BatchNorm,
  Reshape,
  UpsampleNearest,
  AttentionPair,
};

const char* op_kind_name(OpKind k);

// One recorded primitive application. attrs/iattrs carry the scalar
// attributes a replay needs (stride, padding, eps, labels, stashed eval
// statistics, ...); tensors live in the tape registry.
struct TapeEntry {
  OpKind kind;
  std::vector<int> inputs;
  int output = -1;
  std::vector<double> attrs;
  std::vector<std::int64_t> iattrs;
};

// Append-only record of primitive applications. Append order is a valid
// topological order, so backward is a single reverse sweep. Single-writer:
// one training/attack step owns one tape.
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // recording surface (used by the ops layer)
  int track(const Tensor& t);
  void record(OpKind kind, std::vector<int> inputs, int output,
              std::vector<double> attrs = {}, std::vector<std::int64_t> iattrs = {});
  const Tensor& tensor(int id) const;
  bool produced_here(const Tensor& t) const;
  std::uint64_t serial() const { return serial_; }

  std::size_t num_entries() const { return entries_.size(); }
  const TapeEntry& entry(std::size_t i) const { return entries_.at(i); }

  // Reverse-topological accumulation into every requires_grad tensor
  // reachable from the loss. Throws on a detached loss and on repeated
  // backward without reset().
  void backward(const Tensor& loss);

  // Recomputes every recorded output in record order from the current
  // registry values. Pure: no running-stat updates, no grad changes.
  void replay_forward();

  // allows a further backward pass (gradient buffers are left untouched)
  void reset();

 private:
  std::uint64_t serial_;
  std::vector<Tensor> registry_;
  std::unordered_map<const void*, int> ids_;
  std::vector<TapeEntry> entries_;
  bool backward_done_ = false;
};

// Scalar loss tensor with tape provenance.
using LossValue = Tensor;

}  // namespace unlearn::ad
