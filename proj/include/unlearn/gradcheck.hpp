// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>

#include "unlearn/tape.hpp"
#include "unlearn/tensor.hpp"

namespace unlearn::ad {

// f builds a scalar loss from the point tensor; when given a tape it must
// record the computation (same path both ways).
using ScalarFn = std::function<Tensor(const Tensor&, Tape*)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

// Central finite differences per coordinate against the tape gradient.
// Relative error: max|g_a - g_n| / max(1, |g_a|, |g_n|).
// Coordinates where the one-sided difference quotients disagree by more than
// kink_tol (relative) sit on a non-differentiable kink and are excluded from
// the max; the count is reported.
GradCheckResult finite_diff_gradcheck(const ScalarFn& f, const Tensor& point,
                                      double step = 1e-5, double kink_tol = 1e-3);

}  // namespace unlearn::ad
