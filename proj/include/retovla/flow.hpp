#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "retovla/policy.hpp"
#include "retovla/tensor.hpp"

namespace retovla {

/// Linear interpolation path between data a0 (t = 0) and noise a1 (t = 1).
/// The leading axis of every tensor is the batch; `t` has one entry per batch
/// element.
struct FlowSample {
  Tensor a0;
  Tensor a1;
  std::vector<double> t;
  Tensor a_t;  // (1 - t) a0 + t a1
  Tensor u;    // a1 - a0
};

/// Draws a1 ~ N(0, I) (all coordinates first), then t ~ U[0, 1] per batch
/// element.
FlowSample make_flow_sample(const Tensor& a0, std::mt19937_64& rng);
/// Builds the sample from given noise and times.
FlowSample make_flow_sample(const Tensor& a0, const Tensor& a1, std::vector<double> t);

/// v(a_t, t); `t` holds one time per batch element.
using VectorField = std::function<Tensor(const Tensor& a_t, std::span<const double> t)>;

/// Mean squared error between v(a_t, t) and u over all coordinates.
Tensor fm_loss(const VectorField& field, const FlowSample& sample);
Tensor fm_loss(const VectorField& field, const Tensor& a0, std::mt19937_64& rng);
/// Encodes the condition once and regresses the model's field on batch.actions.
Tensor fm_loss(const PolicyModel& model, const SceneBatch& batch, std::mt19937_64& rng);

/// Euler integration from t = 1 to t = 0 in `steps` uniform steps, starting
/// from `start`. The field is evaluated at t = 1 - k/steps, k = 0..steps-1,
/// never at t = 0. Non-finite states raise NumericError.
Tensor integrate_field(const VectorField& field, const Tensor& start, std::size_t steps);

/// Draws the start from N(0, I) with the given shape, then integrates.
Tensor sample_actions(const VectorField& field, const Shape& shape, std::size_t steps, std::mt19937_64& rng);
Tensor sample_actions(const PolicyModel& model, const ConditionBundle& cond, std::size_t steps,
                      std::mt19937_64& rng);

/// Gaussian tensor from the same draw order the samplers use.
Tensor standard_normal(const Shape& shape, std::mt19937_64& rng);

}  // namespace retovla
