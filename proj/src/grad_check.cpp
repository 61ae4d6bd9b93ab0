#include "retovla/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace retovla {

namespace {

double evaluate(const std::function<Tensor()>& fn) {
  const double v = fn().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
  return v;
}

}  // namespace

GradCheckResult grad_check_detailed(const std::function<Tensor()>& fn, std::span<Tensor> inputs, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-4)) {
    throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-4], got " + std::to_string(eps));
  }
  for (const Tensor& t : inputs) {
    if (!t.requires_grad()) throw std::invalid_argument("grad_check: every input must require grad");
  }

  reset_graph();
  for (Tensor& t : inputs) t.clear_grad();
  Tensor loss = fn();
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: function value is not finite");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (Tensor& t : inputs) {
    auto g = t.mutable_grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto x = inputs[k].mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + eps;
      const double up = evaluate(fn);
      x[i] = saved - eps;
      const double down = evaluate(fn);
      x[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      result.max_relative_error = std::max(result.max_relative_error, abs_err / denom);
      ++result.coordinates;
    }
  }
  return result;
}

double grad_check(const std::function<Tensor()>& fn, std::span<Tensor> inputs, double eps) {
  return grad_check_detailed(fn, inputs, eps).max_relative_error;
}

}  // namespace retovla
