// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "unlearn/tape.hpp"

namespace unlearn::ad::detail {

// Accumulates input gradients for one recorded entry from the output grad.
void op_backward(const TapeEntry& e, std::vector<Tensor>& registry);

// Recomputes the entry's output in place from the current registry values.
// Pure: no running-statistics updates.
void op_replay(const TapeEntry& e, std::vector<Tensor>& registry);

}  // namespace unlearn::ad::detail
