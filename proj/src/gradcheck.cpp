#include "p3d/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace p3d {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

std::vector<Index> probe_set(const GradCheckOptions& opts, Index n) {
  if (!opts.coordinates.empty()) return opts.coordinates;
  std::vector<Index> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), Index{0});
  return all;
}

/// Central difference at opts.step, then at each retry step until one is
/// within tolerance; the best agreement is recorded.
void probe_coordinate(GradCheckReport& r, Index coord, double a, const std::function<double(double)>& central,
           const GradCheckOptions& opts) {
  double num = central(opts.step);
  double e = relative_error(a, num, opts.floor);
  bool retried = false;
  for (double h : opts.retry_steps) {
    if (e < opts.tolerance) break;
    retried = true;
    const double n2 = central(h);
    const double e2 = relative_error(a, n2, opts.floor);
    if (e2 < e) {
      e = e2;
      num = n2;
    }
  }
  ++r.coordinates_checked;
  if (retried) ++r.coordinates_retried;
  if (e > r.max_rel_error || r.worst_coordinate < 0) {
    r.max_rel_error = e;
    r.worst_coordinate = coord;
    r.analytic_at_worst = a;
    r.numeric_at_worst = num;
  }
}

}  // namespace

GradCheckReport finite_difference_check(const ScalarFunction& f, const Tensor& x, const GradCheckOptions& opts) {
  Tensor analytic;
  {
    Graph g;
    Var leaf = g.input(x, true);
    Var out = f(g, leaf);
    g.backward(out);
    analytic = g.grad(leaf);
  }
  auto eval = [&](const Tensor& probe) {
    Graph g;
    Var leaf = g.input(probe, false);
    return f(g, leaf).value()[0];
  };
  GradCheckReport report;
  Tensor probe_x = x;
  for (Index i : probe_set(opts, x.size())) {
    const double orig = probe_x[i];
    auto central = [&](double h) {
      probe_x[i] = orig + h;
      const double fp = eval(probe_x);
      probe_x[i] = orig - h;
      const double fm = eval(probe_x);
      probe_x[i] = orig;
      return (fp - fm) / (2.0 * h);
    };
    probe_coordinate(report, i, analytic[i], central, opts);
  }
  report.passed = report.max_rel_error < opts.tolerance;
  return report;
}

GradCheckReport parameter_gradient_check(const std::function<Var(Graph&)>& loss, Parameter& param,
                                         const GradCheckOptions& opts) {
  param.zero_grad();
  {
    Graph g;
    Var out = loss(g);
    g.backward(out);
  }
  const Tensor analytic = param.grad;
  auto eval = [&]() {
    Graph g;
    return loss(g).value()[0];
  };
  GradCheckReport report;
  for (Index i : probe_set(opts, param.value.size())) {
    const double orig = param.value[i];
    auto central = [&](double h) {
      param.value[i] = orig + h;
      const double fp = eval();
      param.value[i] = orig - h;
      const double fm = eval();
      param.value[i] = orig;
      return (fp - fm) / (2.0 * h);
    };
    probe_coordinate(report, i, analytic[i], central, opts);
  }
  report.passed = report.max_rel_error < opts.tolerance;
  return report;
}

}  // namespace p3d
