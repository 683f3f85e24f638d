#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "distillforge/common.hpp"
#include "distillforge/tensor.hpp"

namespace distillforge {

/// Result of comparing analytic gradients against central differences.
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

/// Checks d(f)/d(x) for a scalar-valued function by central differences.
/// `f` must rebuild its computation from the current contents of `x` on every
/// call; the tape passed in is only used for the analytic pass. Relative
/// error is |a - n| / (|a| + |n| + 1e-8) per coordinate.
template <typename S>
GradCheckResult finite_difference_check(
    const std::function<TensorT<S>(TapeT<S>&)>& f, TensorT<S>& x, double step) {
  if (step <= 0.0) {
    fail(ErrorKind::invalid_argument,
         "finite_difference_check: step must be positive, got " + std::to_string(step));
  }
  if (!x.defined() || x.numel() == 0) {
    fail(ErrorKind::invalid_argument, "finite_difference_check: empty input tensor");
  }
  x.set_requires_grad(true);
  x.zero_grad();

  TapeT<S> tape;
  TensorT<S> loss = f(tape);
  if (loss.numel() != 1) {
    fail(ErrorKind::invalid_argument,
         "finite_difference_check: function must return a scalar, got shape " +
             shape_to_string(loss.shape()));
  }
  tape.backward(loss);
  std::vector<S> analytic = x.grad();

  GradCheckResult result;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const S saved = x.values()[i];
    x.values()[i] = saved + static_cast<S>(step);
    TapeT<S> t_plus;
    const double up = static_cast<double>(f(t_plus).item());
    x.values()[i] = saved - static_cast<S>(step);
    TapeT<S> t_minus;
    const double down = static_cast<double>(f(t_minus).item());
    x.values()[i] = saved;

    const double numeric = (up - down) / (2.0 * step);
    const double a = static_cast<double>(analytic[i]);
    const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-8);
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_index = i;
      result.analytic_at_worst = a;
      result.numeric_at_worst = numeric;
    }
  }
  return result;
}

}  // namespace distillforge
