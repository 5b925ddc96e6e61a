// SPDX-License-Identifier: Apache-2.0
#include "unlearn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace unlearn::ad {

GradCheckResult finite_diff_gradcheck(const ScalarFn& f, const Tensor& point,
                                      double step, double kink_tol) {
  if (step <= 0.0) throw std::invalid_argument("gradcheck: step must be positive");

  // analytic gradient at the point
  Tensor x = point.detached();
  x.set_requires_grad(true);
  Tape tape;
  Tensor loss = f(x, &tape);
  if (loss.numel() != 1)
    throw std::invalid_argument("gradcheck: function must be scalar-valued");
  tape.backward(loss);
  std::vector<double> analytic(x.numel(), 0.0);
  if (x.has_grad()) {
    auto g = x.grad();
    std::copy(g.begin(), g.end(), analytic.begin());
  }

  Tensor probe = point.detached();
  auto pd = probe.data();
  auto eval = [&]() {
    Tensor v = f(probe, nullptr);
    const double y = v.item();
    if (!std::isfinite(y)) throw std::runtime_error("gradcheck: non-finite evaluation");
    return y;
  };

  const double f0 = eval();
  GradCheckResult res;
  for (std::size_t i = 0; i < pd.size(); ++i) {
    const double orig = pd[i];
    pd[i] = orig + step;
    const double fp = eval();
    pd[i] = orig - step;
    const double fm = eval();
    pd[i] = orig;

    const double dplus = (fp - f0) / step;
    const double dminus = (f0 - fm) / step;
    const double scale = std::max({1.0, std::abs(dplus), std::abs(dminus)});
    if (std::abs(dplus - dminus) > kink_tol * scale) {
      ++res.skipped_kinks;
      continue;
    }
    const double numeric = (fp - fm) / (2.0 * step);
    const double ga = analytic[i];
    const double rel =
        std::abs(ga - numeric) / std::max({1.0, std::abs(ga), std::abs(numeric)});
    res.max_rel_err = std::max(res.max_rel_err, rel);
    ++res.checked;
  }
  return res;
}

}  // namespace unlearn::ad
