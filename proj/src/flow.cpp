#include "retovla/flow.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace retovla {

Tensor standard_normal(const Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(shape, std::move(v));
}

FlowSample make_flow_sample(const Tensor& a0, const Tensor& a1, std::vector<double> t) {
  if (a0.rank() == 0) throw ShapeError("make_flow_sample: a0 needs a leading batch axis");
  if (a1.shape() != a0.shape()) {
    throw ShapeError("make_flow_sample: noise " + shape_str(a1.shape()) + " does not match " + shape_str(a0.shape()));
  }
  const std::size_t B = a0.dim(0);
  if (t.size() != B) throw ShapeError("make_flow_sample: need one time per batch element");
  for (double ti : t) {
    if (!(ti >= 0.0 && ti <= 1.0)) throw std::out_of_range("make_flow_sample: t must lie in [0, 1]");
  }
  const std::size_t per = B == 0 ? 0 : a0.numel() / B;
  std::vector<double> at(a0.numel()), u(a0.numel());
  const auto x0 = a0.data();
  const auto x1 = a1.data();
  for (std::size_t b = 0; b < B; ++b) {
    const double tb = t[b];
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      at[i] = (1.0 - tb) * x0[i] + tb * x1[i];
      u[i] = x1[i] - x0[i];
    }
  }
  FlowSample s;
  s.a0 = a0;
  s.a1 = a1;
  s.t = std::move(t);
  s.a_t = Tensor(a0.shape(), std::move(at));
  s.u = Tensor(a0.shape(), std::move(u));
  return s;
}

FlowSample make_flow_sample(const Tensor& a0, std::mt19937_64& rng) {
  if (a0.rank() == 0) throw ShapeError("make_flow_sample: a0 needs a leading batch axis");
  Tensor a1 = standard_normal(a0.shape(), rng);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> t(a0.dim(0));
  for (double& ti : t) ti = unif(rng);
  return make_flow_sample(a0, a1, std::move(t));
}

Tensor fm_loss(const VectorField& field, const FlowSample& sample) {
  return mse_loss(field(sample.a_t, sample.t), sample.u);
}

Tensor fm_loss(const VectorField& field, const Tensor& a0, std::mt19937_64& rng) {
  return fm_loss(field, make_flow_sample(a0, rng));
}

Tensor fm_loss(const PolicyModel& model, const SceneBatch& batch, std::mt19937_64& rng) {
  if (!batch.actions.defined()) throw std::invalid_argument("fm_loss: batch has no expert actions");
  ConditionBundle cond = encode_condition(batch, model);
  return fm_loss([&](const Tensor& a_t, std::span<const double> t) { return predict_field(model, a_t, t, cond); },
                 batch.actions, rng);
}

Tensor integrate_field(const VectorField& field, const Tensor& start, std::size_t steps) {
  if (steps == 0) throw std::invalid_argument("sample_actions: steps must be >= 1");
  if (start.rank() == 0) throw ShapeError("sample_actions: state needs a leading batch axis");
  NoGradGuard no_grad;
  const double dt = 1.0 / static_cast<double>(steps);
  std::vector<double> a(start.data().begin(), start.data().end());
  std::vector<double> times(start.dim(0));
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = 1.0 - static_cast<double>(k) / static_cast<double>(steps);
    std::fill(times.begin(), times.end(), t);
    Tensor v = field(Tensor(start.shape(), a), times);
    if (v.shape() != start.shape()) {
      throw ShapeError("sample_actions: field returned " + shape_str(v.shape()) + " for state " +
                       shape_str(start.shape()));
    }
    const auto vd = v.data();
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] -= dt * vd[i];
      if (!std::isfinite(a[i])) {
        throw NumericError("sample_actions: non-finite state at step " + std::to_string(k) + " (t = " +
                           std::to_string(t) + "), coordinate " + std::to_string(i));
      }
    }
  }
  return Tensor(start.shape(), std::move(a));
}

Tensor sample_actions(const VectorField& field, const Shape& shape, std::size_t steps, std::mt19937_64& rng) {
  if (steps == 0) throw std::invalid_argument("sample_actions: steps must be >= 1");
  return integrate_field(field, standard_normal(shape, rng), steps);
}

Tensor sample_actions(const PolicyModel& model, const ConditionBundle& cond, std::size_t steps,
                      std::mt19937_64& rng) {
  const ModelConfig& c = model.config();
  const Shape shape{cond.context.dim(0), c.action_horizon, c.action_dim};
  return sample_actions(
      [&](const Tensor& a, std::span<const double> t) { return predict_field(model, a, t, cond); }, shape, steps,
      rng);
}

}  // namespace retovla
