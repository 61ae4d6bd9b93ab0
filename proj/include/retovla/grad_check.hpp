#pragma once

#include <functional>
#include <span>

#include "retovla/tensor.hpp"

namespace retovla {

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences, coordinate by coordinate over every input.
///
/// `fn` must be deterministic and read `inputs` through the same handles that
/// are passed here; their values are perturbed in place and restored. The
/// relative error of a coordinate is |analytic - numeric| divided by
/// max(|analytic|, |numeric|, 1e-8).
GradCheckResult grad_check_detailed(const std::function<Tensor()>& fn, std::span<Tensor> inputs,
                                    double eps = 1e-5);

/// Maximum relative error of `grad_check_detailed`.
double grad_check(const std::function<Tensor()>& fn, std::span<Tensor> inputs, double eps = 1e-5);

}  // namespace retovla
