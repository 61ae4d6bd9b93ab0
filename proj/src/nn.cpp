#include "retovla/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace retovla {

namespace {

std::vector<double> gaussian(std::size_t n, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

void require_rank3(const Tensor& x, std::size_t width, const char* what) {
  if (x.rank() != 3 || x.dim(2) != width) {
    throw ShapeError(std::string(what) + ": expected [B, S, " + std::to_string(width) + "], got " +
                     shape_str(x.shape()));
  }
}

}  // namespace

Tensor linear(const Tensor& x, const Linear& layer) { return affine(x, layer.weight, layer.bias); }

Linear make_linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, bool with_bias,
                   std::mt19937_64& rng) {
  Linear l;
  l.weight = store.add(name + ".weight", {in, out}, gaussian(in * out, 1.0 / std::sqrt(static_cast<double>(in)), rng));
  if (with_bias) l.bias = store.add(name + ".bias", {out}, std::vector<double>(out, 0.0));
  return l;
}

Tensor layernorm(const Tensor& x, const LayerNormParams& p) { return layernorm(x, p.gain, p.bias, 1e-5); }

LayerNormParams make_layernorm(ParameterStore& store, const std::string& name, std::size_t width) {
  return {store.add(name + ".gain", {width}, std::vector<double>(width, 1.0)),
          store.add(name + ".bias", {width}, std::vector<double>(width, 0.0))};
}

void AttentionParams::validate() const {
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw std::invalid_argument("attention: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                std::to_string(n_heads));
  }
  for (const Linear* l : {&query, &key, &value, &output}) {
    if (l->weight.shape() != Shape{d_model, d_model}) {
      throw ShapeError("attention: projection weight " + shape_str(l->weight.shape()) + " inconsistent with d_model " +
                       std::to_string(d_model));
    }
  }
}

AttentionParams make_attention(ParameterStore& store, const std::string& name, std::size_t d_model,
                               std::size_t n_heads, std::mt19937_64& rng) {
  AttentionParams p;
  p.d_model = d_model;
  p.n_heads = n_heads;
  if (n_heads == 0 || d_model % n_heads != 0) p.validate();
  p.query = make_linear(store, name + ".query", d_model, d_model, false, rng);
  p.key = make_linear(store, name + ".key", d_model, d_model, false, rng);
  p.value = make_linear(store, name + ".value", d_model, d_model, false, rng);
  p.output = make_linear(store, name + ".output", d_model, d_model, true, rng);
  return p;
}

Tensor split_heads(const Tensor& x, std::size_t n_heads) {
  if (x.rank() != 3 || n_heads == 0 || x.dim(2) % n_heads != 0) {
    throw ShapeError("split_heads: cannot split " + shape_str(x.shape()) + " into " + std::to_string(n_heads) +
                     " heads");
  }
  const std::size_t b = x.dim(0), s = x.dim(1), dh = x.dim(2) / n_heads;
  return reshape_permute(x, {b, s, n_heads, dh}, {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("merge_heads: expected rank 4, got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), h = x.dim(1), s = x.dim(2), dh = x.dim(3);
  return permute_reshape(x, {0, 2, 1, 3}, {b, s, h * dh});
}

AttentionKV project_kv(const Tensor& kv_input, const AttentionParams& params) {
  require_rank3(kv_input, params.d_model, "attention kv_input");
  return {split_heads(linear(kv_input, params.key), params.n_heads),
          split_heads(linear(kv_input, params.value), params.n_heads)};
}

AttentionKV concat_kv(const AttentionKV& base, const AttentionKV& extra) {
  const Shape& b = base.keys.shape();
  const Shape& e = extra.keys.shape();
  if (e.size() != 4 || b.size() != 4) throw ShapeError("concat_kv: keys must be [B, H, S, d_head]");
  if (extra.values.shape() != e || base.values.shape() != b) throw ShapeError("concat_kv: keys/values shape differ");
  if (e[1] != b[1]) {
    throw ShapeError("concat_kv: head count " + std::to_string(e[1]) + " does not match " + std::to_string(b[1]));
  }
  if (e[0] != b[0] || e[3] != b[3]) {
    throw ShapeError("concat_kv: extra " + shape_str(e) + " incompatible with " + shape_str(b));
  }
  return {concat(base.keys, extra.keys, 2), concat(base.values, extra.values, 2)};
}

Tensor attend(const Tensor& q_input, const AttentionKV& kv, const AttentionParams& params, AttentionTrace* trace) {
  require_rank3(q_input, params.d_model, "attention q_input");
  const Shape& ks = kv.keys.shape();
  if (ks.size() != 4 || ks[0] != q_input.dim(0) || ks[1] != params.n_heads || ks[3] != params.d_head() ||
      kv.values.shape() != ks) {
    throw ShapeError("attention: keys " + shape_str(ks) + " incompatible with queries " + shape_str(q_input.shape()));
  }
  if (ks[2] == 0) throw ShapeError("attention: empty key sequence");
  Tensor q = split_heads(linear(q_input, params.query), params.n_heads);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(params.d_head()));
  Tensor heads = scaled_dot_attention(q, kv.keys, kv.values, inv_scale, trace != nullptr ? &trace->weights : nullptr);
  return linear(merge_heads(heads), params.output);
}

Tensor attention(const Tensor& q_input, const Tensor& kv_input, const AttentionParams& params,
                 const std::optional<AttentionKV>& extra_kv, AttentionTrace* trace) {
  if (q_input.rank() == 3 && kv_input.rank() == 3 && q_input.dim(0) != kv_input.dim(0)) {
    throw ShapeError("attention: batch mismatch between " + shape_str(q_input.shape()) + " and " +
                     shape_str(kv_input.shape()));
  }
  AttentionKV kv = project_kv(kv_input, params);
  if (extra_kv) kv = concat_kv(kv, *extra_kv);
  return attend(q_input, kv, params, trace);
}

BlockParams make_encoder_block(ParameterStore& store, const std::string& name, std::size_t d_model,
                               std::size_t n_heads, std::mt19937_64& rng) {
  BlockParams p;
  p.norm_attn = make_layernorm(store, name + ".norm_attn", d_model);
  p.self_attn = make_attention(store, name + ".self_attn", d_model, n_heads, rng);
  p.norm_ffn = make_layernorm(store, name + ".norm_ffn", d_model);
  p.ffn.up = make_linear(store, name + ".ffn.up", d_model, kFeedForwardRatio * d_model, true, rng);
  p.ffn.down = make_linear(store, name + ".ffn.down", kFeedForwardRatio * d_model, d_model, true, rng);
  return p;
}

BlockParams make_decoder_block(ParameterStore& store, const std::string& name, std::size_t d_model,
                               std::size_t n_heads, std::mt19937_64& rng) {
  BlockParams p;
  p.has_cross = true;
  p.norm_attn = make_layernorm(store, name + ".norm_attn", d_model);
  p.self_attn = make_attention(store, name + ".self_attn", d_model, n_heads, rng);
  p.norm_cross = make_layernorm(store, name + ".norm_cross", d_model);
  p.cross_attn = make_attention(store, name + ".cross_attn", d_model, n_heads, rng);
  p.norm_ffn = make_layernorm(store, name + ".norm_ffn", d_model);
  p.ffn.up = make_linear(store, name + ".ffn.up", d_model, kFeedForwardRatio * d_model, true, rng);
  p.ffn.down = make_linear(store, name + ".ffn.down", kFeedForwardRatio * d_model, d_model, true, rng);
  return p;
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) { return linear(gelu(linear(x, p.up)), p.down); }

Tensor encoder_block(const Tensor& x, const BlockParams& params) {
  require_rank3(x, params.self_attn.d_model, "encoder_block");
  Tensor h = layernorm(x, params.norm_attn);
  Tensor y = add(x, attention(h, h, params.self_attn));
  return add(y, feed_forward(layernorm(y, params.norm_ffn), params.ffn));
}

Tensor decoder_block(const Tensor& x, const Tensor& context, const BlockParams& params,
                     const std::optional<AttentionKV>& extra_kv, AttentionTrace* cross_trace) {
  if (!params.has_cross) throw std::invalid_argument("decoder_block: block has no cross-attention parameters");
  require_rank3(x, params.self_attn.d_model, "decoder_block");
  require_rank3(context, params.cross_attn.d_model, "decoder_block context");
  Tensor h = layernorm(x, params.norm_attn);
  Tensor y = add(x, attention(h, h, params.self_attn));
  y = add(y, attention(layernorm(y, params.norm_cross), context, params.cross_attn, extra_kv, cross_trace));
  return add(y, feed_forward(layernorm(y, params.norm_ffn), params.ffn));
}

namespace {

void sinusoid_row(double position, std::size_t d_model, double* out) {
  for (std::size_t j = 0; j < d_model; ++j) {
    const double exponent = static_cast<double>(2 * (j / 2)) / static_cast<double>(d_model);
    const double angle = position / std::pow(10000.0, exponent);
    out[j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
  }
}

}  // namespace

Tensor positional_encoding(std::size_t length, std::size_t d_model) {
  if (length == 0 || d_model == 0) throw std::invalid_argument("positional_encoding: length and width must be >= 1");
  std::vector<double> table(length * d_model);
  for (std::size_t p = 0; p < length; ++p) sinusoid_row(static_cast<double>(p), d_model, table.data() + p * d_model);
  return Tensor({length, d_model}, std::move(table));
}

Tensor time_embedding(double t, std::size_t d_model) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::out_of_range("time_embedding: t must lie in [0, 1]");
  if (d_model == 0) throw std::invalid_argument("time_embedding: width must be >= 1");
  std::vector<double> row(d_model);
  sinusoid_row(1000.0 * t, d_model, row.data());
  return Tensor({d_model}, std::move(row));
}

}  // namespace retovla
