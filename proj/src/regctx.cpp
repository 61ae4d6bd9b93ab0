#include "retovla/regctx.hpp"

#include <cmath>
#include <stdexcept>

namespace retovla {

double GateParam::sigma() const { return 1.0 / (1.0 + std::exp(-logit.item())); }

RegisterBank make_register_bank(ParameterStore& store, const std::string& name, std::size_t count,
                                std::size_t d_vlm, std::size_t n_heads, std::mt19937_64& rng) {
  if (count == 0) throw std::invalid_argument("register bank needs at least one register");
  std::normal_distribution<double> dist(0.0, 0.02);
  std::vector<double> init(count * d_vlm);
  for (double& v : init) v = dist(rng);
  RegisterBank bank;
  bank.r_init = store.add(name + ".r_init", {count, d_vlm}, std::move(init));
  bank.aggregator = make_attention(store, name + ".aggregator", d_vlm, n_heads, rng);
  return bank;
}

RegisterProjection make_register_projection(ParameterStore& store, const std::string& name, std::size_t d_vlm,
                                            std::size_t d_model, std::size_t n_heads, std::mt19937_64& rng) {
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw std::invalid_argument("register projection: d_model not divisible by n_heads");
  }
  RegisterProjection p;
  p.key = make_linear(store, name + ".key", d_vlm, d_model, false, rng);
  p.value = make_linear(store, name + ".value", d_vlm, d_model, false, rng);
  p.n_heads = n_heads;
  return p;
}

GateParam make_gate(ParameterStore& store, const std::string& name) {
  return GateParam{store.add(name + ".logit", {1}, {0.0})};
}

SceneRegisters aggregate_scene(const Tensor& patches, const RegisterBank& bank) {
  if (bank.count() == 0) throw std::invalid_argument("aggregate_scene: register bank is empty");
  if (patches.rank() != 3) throw ShapeError("aggregate_scene: patches must be [B, N, D], got " + shape_str(patches.shape()));
  if (patches.dim(1) == 0) throw ShapeError("aggregate_scene: empty patch sequence");
  if (patches.dim(2) != bank.width()) {
    throw ShapeError("aggregate_scene: patch width " + std::to_string(patches.dim(2)) + " does not match D_vlm " +
                     std::to_string(bank.width()));
  }
  Tensor queries = broadcast_batch(bank.r_init, patches.dim(0));
  return SceneRegisters{attention(queries, patches, bank.aggregator)};
}

AttentionKV project_registers(const SceneRegisters& regs, const RegisterProjection& proj) {
  const Tensor& r = regs.r_scene;
  if (r.rank() != 3 || r.dim(2) != proj.key.in_features()) {
    throw ShapeError("project_registers: registers " + shape_str(r.shape()) + " do not match projection input " +
                     std::to_string(proj.key.in_features()));
  }
  return {split_heads(linear(r, proj.key), proj.n_heads), split_heads(linear(r, proj.value), proj.n_heads)};
}

AttentionKV gate_registers(const AttentionKV& reg, const GateParam& gate) {
  Tensor s = sigmoid(gate.logit);
  return {scale_by(reg.keys, s), scale_by(reg.values, s)};
}

AttentionKV gated_inject(const AttentionKV& base, const AttentionKV& reg, const GateParam& gate) {
  return concat_kv(base, gate_registers(reg, gate));
}

}  // namespace retovla
