// SPDX-License-Identifier: Apache-2.0
#include "unlearn/tape.hpp"

#include <atomic>
#include <stdexcept>

#include "op_dispatch.hpp"

namespace unlearn::ad {

namespace {
std::atomic<std::uint64_t> g_tape_serial{1};
}

Tape::Tape() : serial_(g_tape_serial.fetch_add(1)) {}

int Tape::track(const Tensor& t) {
  auto it = ids_.find(t.storage_id());
  if (it != ids_.end()) return it->second;
  const int id = static_cast<int>(registry_.size());
  registry_.push_back(t);
  ids_.emplace(t.storage_id(), id);
  return id;
}

void Tape::record(OpKind kind, std::vector<int> inputs, int output,
                  std::vector<double> attrs, std::vector<std::int64_t> iattrs) {
  registry_.at(static_cast<std::size_t>(output)).impl_->tape_serial = serial_;
  entries_.push_back(TapeEntry{kind, std::move(inputs), output, std::move(attrs),
                               std::move(iattrs)});
}

const Tensor& Tape::tensor(int id) const {
  return registry_.at(static_cast<std::size_t>(id));
}

bool Tape::produced_here(const Tensor& t) const {
  return t.defined() && t.impl_->tape_serial == serial_;
}

void Tape::backward(const Tensor& loss) {
  if (!produced_here(loss))
    throw std::runtime_error(
        "backward on detached value: loss was not produced by this tape");
  if (loss.numel() != 1)
    throw std::runtime_error("backward requires a scalar loss");
  if (backward_done_)
    throw std::runtime_error("repeated backward without reset on this tape");
  backward_done_ = true;

  auto it = ids_.find(loss.storage_id());
  Tensor& seed = registry_.at(static_cast<std::size_t>(it->second));
  seed.ensure_grad();
  seed.grad()[0] += 1.0;

  for (auto e = entries_.rbegin(); e != entries_.rend(); ++e)
    detail::op_backward(*e, registry_);
}

void Tape::replay_forward() {
  for (const TapeEntry& e : entries_) detail::op_replay(e, registry_);
}

void Tape::reset() { backward_done_ = false; }

}  // namespace unlearn::ad
