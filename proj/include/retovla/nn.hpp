#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "retovla/params.hpp"
#include "retovla/tensor.hpp"

namespace retovla {

/// Affine map over the last axis; `bias` may be undefined.
struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out] or undefined

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

Tensor linear(const Tensor& x, const Linear& layer);

/// Weights ~ N(0, 1/in); bias zero when requested.
Linear make_linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, bool with_bias,
                   std::mt19937_64& rng);

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

Tensor layernorm(const Tensor& x, const LayerNormParams& p);
LayerNormParams make_layernorm(ParameterStore& store, const std::string& name, std::size_t width);

/// Multi-head attention projections. Query/key/value projections carry no
/// bias; the output projection does.
struct AttentionParams {
  std::size_t d_model = 0;
  std::size_t n_heads = 0;
  Linear query;
  Linear key;
  Linear value;
  Linear output;

  std::size_t d_head() const { return d_model / n_heads; }
  void validate() const;
};

AttentionParams make_attention(ParameterStore& store, const std::string& name, std::size_t d_model,
                               std::size_t n_heads, std::mt19937_64& rng);

/// Head-major keys and values, [batch, heads, sequence, d_head].
struct AttentionKV {
  Tensor keys;
  Tensor values;

  std::size_t sequence() const { return keys.dim(2); }
};

/// [B, S, d_model] -> [B, H, S, d_head]
Tensor split_heads(const Tensor& x, std::size_t n_heads);
/// [B, H, S, d_head] -> [B, S, H * d_head]
Tensor merge_heads(const Tensor& x);

/// Key/value projection of `kv_input` in head-major layout.
AttentionKV project_kv(const Tensor& kv_input, const AttentionParams& params);

/// Appends `extra` after `base` along the key-sequence axis.
AttentionKV concat_kv(const AttentionKV& base, const AttentionKV& extra);

/// Softmax weights [B, H, S_q, S_kv] of the most recent attention call that
/// was given a trace.
struct AttentionTrace {
  Tensor weights;
};

/// Scaled dot-product attention of projected queries over a prepared KV set.
Tensor attend(const Tensor& q_input, const AttentionKV& kv, const AttentionParams& params,
              AttentionTrace* trace = nullptr);

/// Projects queries from `q_input` and keys/values from `kv_input`, appends
/// `extra_kv` (already head-major) to the keys and values when present, and
/// applies the output projection. Output is [B, S_q, d_model].
Tensor attention(const Tensor& q_input, const Tensor& kv_input, const AttentionParams& params,
                 const std::optional<AttentionKV>& extra_kv = std::nullopt, AttentionTrace* trace = nullptr);

struct FeedForwardParams {
  Linear up;    // d_model -> 4 d_model
  Linear down;  // 4 d_model -> d_model
};

struct BlockParams {
  LayerNormParams norm_attn;
  AttentionParams self_attn;
  LayerNormParams norm_cross;   // decoder only
  AttentionParams cross_attn;   // decoder only
  LayerNormParams norm_ffn;
  FeedForwardParams ffn;
  bool has_cross = false;
};

inline constexpr std::size_t kFeedForwardRatio = 4;

BlockParams make_encoder_block(ParameterStore& store, const std::string& name, std::size_t d_model,
                               std::size_t n_heads, std::mt19937_64& rng);
BlockParams make_decoder_block(ParameterStore& store, const std::string& name, std::size_t d_model,
                               std::size_t n_heads, std::mt19937_64& rng);

Tensor feed_forward(const Tensor& x, const FeedForwardParams& p);

/// Pre-norm residual block: x + attn(norm(x)), then + ffn(norm(.)).
Tensor encoder_block(const Tensor& x, const BlockParams& params);

/// Self-attention, cross-attention to `context` (with `extra_kv` appended to
/// its keys/values) and feed-forward, each a pre-norm residual.
Tensor decoder_block(const Tensor& x, const Tensor& context, const BlockParams& params,
                     const std::optional<AttentionKV>& extra_kv = std::nullopt,
                     AttentionTrace* cross_trace = nullptr);

/// Sinusoid table [length, d_model]: even columns sin, odd columns cos of
/// pos / 10000^(2i / d_model).
Tensor positional_encoding(std::size_t length, std::size_t d_model);

/// Sinusoid row for the (fractional) position 1000 * t, shape [d_model].
Tensor time_embedding(double t, std::size_t d_model);

}  // namespace retovla
