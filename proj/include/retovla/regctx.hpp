#pragma once

#include <cstddef>
#include <random>
#include <string>

#include "retovla/nn.hpp"
#include "retovla/params.hpp"
#include "retovla/tensor.hpp"

namespace retovla {

/// Learnable initial register tokens and the attention block that lets them
/// query the image patches.
struct RegisterBank {
  Tensor r_init;  // [K, D_vlm]
  AttentionParams aggregator;

  std::size_t count() const { return r_init.defined() ? r_init.dim(0) : 0; }
  std::size_t width() const { return r_init.dim(1); }
};

/// Scene-dependent registers, [B, K, D_vlm].
struct SceneRegisters {
  Tensor r_scene;
};

/// Scalar gate logit; injection strength is sigmoid(logit).
struct GateParam {
  Tensor logit;  // [1]

  double sigma() const;
};

/// Maps registers from D_vlm into the action decoder's head layout.
struct RegisterProjection {
  Linear key;    // D_vlm -> heads * d_head, no bias
  Linear value;  // D_vlm -> heads * d_head, no bias
  std::size_t n_heads = 0;
};

/// r_init ~ N(0, 0.02^2); aggregator heads as given.
RegisterBank make_register_bank(ParameterStore& store, const std::string& name, std::size_t count,
                                std::size_t d_vlm, std::size_t n_heads, std::mt19937_64& rng);
RegisterProjection make_register_projection(ParameterStore& store, const std::string& name, std::size_t d_vlm,
                                            std::size_t d_model, std::size_t n_heads, std::mt19937_64& rng);
/// Gate initialized at logit 0 (sigmoid 0.5).
GateParam make_gate(ParameterStore& store, const std::string& name);

/// R_scene = Attention(Q = R_init, K = P, V = P) over patches [B, N, D_vlm].
SceneRegisters aggregate_scene(const Tensor& patches, const RegisterBank& bank);

/// K_reg and V_reg, each [B, heads, K, d_head].
AttentionKV project_registers(const SceneRegisters& regs, const RegisterProjection& proj);

/// sigmoid(g) * K_reg and sigmoid(g) * V_reg.
AttentionKV gate_registers(const AttentionKV& reg, const GateParam& gate);

/// K_final = Concat(K_vlm, sigmoid(g) K_reg), V_final likewise, along the
/// key-sequence axis.
AttentionKV gated_inject(const AttentionKV& base, const AttentionKV& reg, const GateParam& gate);

}  // namespace retovla
