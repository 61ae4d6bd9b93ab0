#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "retovla/kv_config.hpp"
#include "retovla/nn.hpp"
#include "retovla/params.hpp"
#include "retovla/regctx.hpp"
#include "retovla/tensor.hpp"

namespace retovla {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t backbone_depth = 2;
  std::size_t expert_depth = 2;
  std::size_t registers = 2;
  std::size_t patch_count = 64;
  std::size_t action_horizon = 8;
  std::size_t action_dim = 4;
  std::size_t flow_steps = 10;
  std::size_t vocab = 8;
  std::size_t instruction_len = 5;
  std::size_t state_dim = 4;

  std::size_t d_vlm() const { return d_model; }
  /// Patches, instruction tokens and one state token.
  std::size_t context_length() const { return patch_count + instruction_len + 1; }

  void validate() const;
  /// `key = value` lines, one per field, in declaration order.
  std::string to_text() const;
  /// Applies one entry; returns false when the key is not a model field.
  bool apply(const ConfigEntry& entry);
  static ModelConfig from_text(std::string_view text);

  bool operator==(const ModelConfig&) const = default;
};

/// Inputs for a batch of episodes.
struct SceneBatch {
  Tensor patches;                        // [B, N, d_vlm]
  std::vector<std::size_t> instructions;  // B * instruction_len token ids, row-major
  Tensor state;                           // [B, state_dim]
  Tensor actions;                         // [B, H, action_dim] expert chunks; undefined at inference

  std::size_t size() const { return patches.dim(0); }
};

/// Encoded context plus the register stream when the model has registers.
struct ConditionBundle {
  Tensor context;                          // [B, S_c, d_model]
  std::optional<SceneRegisters> registers;
};

/// Register path parameters; absent for K = 0.
struct RegisterPath {
  RegisterBank bank;
  RegisterProjection projection;
  GateParam gate;
};

class PolicyModel {
 public:
  PolicyModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  bool has_registers() const { return registers_.has_value(); }
  const std::optional<RegisterPath>& registers() const { return registers_; }
  std::optional<RegisterPath>& registers() { return registers_; }
  double gate_sigma() const;

  const Tensor& token_embedding() const { return token_embedding_; }
  const Linear& state_embedding() const { return state_embedding_; }
  const std::vector<BlockParams>& encoder() const { return encoder_; }
  const LayerNormParams& encoder_norm() const { return encoder_norm_; }
  const Linear& action_embedding() const { return action_embedding_; }
  const std::vector<BlockParams>& decoder() const { return decoder_; }
  const LayerNormParams& head_norm() const { return head_norm_; }
  const Linear& head() const { return head_; }

 private:
  ModelConfig config_;
  ParameterStore store_;
  Tensor token_embedding_;
  Linear state_embedding_;
  std::vector<BlockParams> encoder_;
  LayerNormParams encoder_norm_;
  Linear action_embedding_;
  std::vector<BlockParams> decoder_;
  LayerNormParams head_norm_;
  Linear head_;
  std::optional<RegisterPath> registers_;
};

/// Semantic stream through the backbone; register stream from the raw patch
/// embeddings when K > 0.
ConditionBundle encode_condition(const SceneBatch& batch, const PolicyModel& model);

/// v_theta(a_t, t, c). `t` holds one time per batch element, or a single time
/// shared by the batch. The final decoder block receives the gated register
/// keys/values; its cross-attention weights go to `final_cross_trace`.
Tensor predict_field(const PolicyModel& model, const Tensor& a_t, std::span<const double> t,
                     const ConditionBundle& cond, AttentionTrace* final_cross_trace = nullptr);

std::size_t count_parameters(const PolicyModel& model);

/// Scalars added by the register path as a function of the configuration:
/// r_init, aggregator, key/value projection and gate.
std::size_t register_parameter_count(const ModelConfig& config);

// Checkpoint: "RTVL", u16 version, u32-length-prefixed config text (model
// fields plus `step`), u32 parameter count, then per parameter a
// u32-length-prefixed name, u8 rank, u32 dims, f32 little-endian payload.
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LoadedCheckpoint {
  PolicyModel model;
  std::size_t step = 0;
};

std::vector<unsigned char> serialize_checkpoint(const PolicyModel& model, std::size_t step);
LoadedCheckpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes);
void save_checkpoint(const PolicyModel& model, std::size_t step, const std::string& path);
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace retovla
