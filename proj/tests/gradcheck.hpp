#pragma once

// Central-difference gradient oracle shared by the unit and acceptance
// suites. Compiled against either library build; the acceptance suite uses
// the double build so that truncation error, not float rounding, bounds the
// comparison.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "sfr/tensor.hpp"

namespace sfr::testing {

struct GradCheckResult {
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::size_t checked = 0;
};

// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps entries whose
// true gradient is essentially zero from dominating through truncation noise:
// below |g| = 1e-4 the comparison becomes absolute at 1e-7.
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// `loss` builds a scalar from the current values of `params` on the tape it
/// is given. Checks every element of every parameter.
inline GradCheckResult check_gradients(std::vector<Tensor> params, const std::function<Tensor(Tape&)>& loss,
                                       double eps = 1e-3, double floor = 1e-4) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape tape;
    Tensor root = loss(tape);
    tape.backward(root);
  }
  GradCheckResult r;
  for (auto& p : params) {
    const std::vector<Scalar> analytic(p.grad().begin(), p.grad().end());
    auto values = p.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const Scalar orig = values[i];
      values[i] = orig + static_cast<Scalar>(eps);
      Tape up(false);
      const double fp = loss(up).item();
      values[i] = orig - static_cast<Scalar>(eps);
      Tape down(false);
      const double fm = loss(down).item();
      values[i] = orig;
      const double numeric = (fp - fm) / (2 * eps);
      r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic[i], numeric, floor));
      r.max_abs_error = std::max(r.max_abs_error, std::abs(analytic[i] - numeric));
      ++r.checked;
    }
  }
  return r;
}

}  // namespace sfr::testing
