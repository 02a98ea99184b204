#pragma once

#include <functional>
#include <span>
#include <vector>

#include "p3d/autograd.hpp"

namespace p3d {

struct GradCheckReport {
  double max_rel_error = 0.0;
  Index worst_coordinate = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  Index coordinates_checked = 0;
  /// Coordinates that needed one of the retry steps.
  Index coordinates_retried = 0;
  bool passed = true;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor: |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  /// Coordinates to probe; empty means all of them.
  std::vector<Index> coordinates;
  /// Smaller steps tried, in order, for a coordinate whose central difference
  /// misses the tolerance. A ReLU or max-pool switch inside [x - h, x + h]
  /// spoils the difference without any fault in the analytic gradient.
  std::vector<double> retry_steps;
};

/// Scalar-valued graph builder: receives a fresh graph and the leaf holding
/// the probed tensor, returns the scalar output.
using ScalarFunction = std::function<Var(Graph&, Var)>;

/// Compares reverse-mode gradients of f at x against central differences.
GradCheckReport finite_difference_check(const ScalarFunction& f, const Tensor& x, const GradCheckOptions& opts = {});

/// Same comparison for gradients with respect to a parameter that the
/// loss builder binds internally.
GradCheckReport parameter_gradient_check(const std::function<Var(Graph&)>& loss, Parameter& param,
                                         const GradCheckOptions& opts = {});

double relative_error(double analytic, double numeric, double floor);

}  // namespace p3d
