#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "zeroshot/errors.hpp"

namespace zeroshot {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_coordinate = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

/// Central-difference verification of an analytic gradient. For each
/// coordinate i, the numeric derivative (f(x+h e_i) - f(x-h e_i)) / 2h is
/// compared against analytic[i] with relative error
/// |a - n| / max(|a|, |n|, 1e-8); the maximum over coordinates is returned.
inline GradCheckResult grad_check(const std::function<double(std::span<const double>)>& f,
                                  std::span<const double> point,
                                  std::span<const double> analytic,
                                  double step = 1e-4) {
  if (point.size() != analytic.size()) {
    throw contract_error("grad_check: point and analytic gradient lengths differ");
  }
  std::vector<double> x(point.begin(), point.end());
  GradCheckResult result;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double fp = f(x);
    x[i] = saved - step;
    const double fm = f(x);
    x[i] = saved;
    const double numeric = (fp - fm) / (2.0 * step);
    const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-8});
    const double rel = std::fabs(analytic[i] - numeric) / denom;
    if (rel >= result.max_rel_error) {
      if (rel > result.max_rel_error || i == 0) {
        result.worst_coordinate = i;
        result.analytic_at_worst = analytic[i];
        result.numeric_at_worst = numeric;
      }
      result.max_rel_error = rel;
    }
  }
  return result;
}

/// Convenience overload returning just the maximal relative error.
inline double max_gradient_error(const std::function<double(std::span<const double>)>& f,
                                 std::span<const double> point,
                                 std::span<const double> analytic,
                                 double step = 1e-4) {
  return grad_check(f, point, analytic, step).max_rel_error;
}

}  // namespace zeroshot
