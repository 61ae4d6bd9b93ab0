#pragma once

// Reference implementations used only by tests. They work on plain vectors
// with explicit loops and never call the library's tensor ops.

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "retovla/nn.hpp"
#include "retovla/tensor.hpp"

namespace oracle {

using retovla::Shape;
using retovla::Tensor;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = false, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(retovla::shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(std::span<const double> x, std::span<const double> y) {
  double d = x.size() == y.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < x.size() && i < y.size(); ++i) d = std::max(d, std::abs(x[i] - y[i]));
  return d;
}

// rows x in_dim times in_dim x out_dim (+ bias)
inline std::vector<double> project(const std::vector<double>& x, std::size_t rows, const Tensor& w, const Tensor* bias) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  std::vector<double> y(rows * out, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = bias != nullptr && bias->defined() ? bias->data()[o] : 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += x[r * in + i] * w.data()[i * out + o];
      y[r * out + o] = acc;
    }
  return y;
}

struct ExtraKV {
  // [heads][seq][d_head], already scaled
  std::vector<std::vector<std::vector<double>>> keys, values;
};

// Explicit per-batch, per-head attention. q_input [B, Sq, D], kv_input
// [B, Skv, D]; extra, when given, is per batch element. Optionally returns
// per (b, h, i) the softmax weights.
inline std::vector<double> attention(const Tensor& q_input, const Tensor& kv_input,
                                     const retovla::AttentionParams& p,
                                     const std::vector<ExtraKV>* extra = nullptr,
                                     std::vector<std::vector<double>>* weights_out = nullptr) {
  const std::size_t B = q_input.dim(0), Sq = q_input.dim(1), D = q_input.dim(2), Skv = kv_input.dim(1);
  const std::size_t H = p.n_heads, dh = D / H;
  std::vector<double> out(B * Sq * D);
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> xq(q_input.data().begin() + b * Sq * D, q_input.data().begin() + (b + 1) * Sq * D);
    std::vector<double> xkv(kv_input.data().begin() + b * Skv * D, kv_input.data().begin() + (b + 1) * Skv * D);
    auto Q = project(xq, Sq, p.query.weight, &p.query.bias);
    auto K = project(xkv, Skv, p.key.weight, &p.key.bias);
    auto V = project(xkv, Skv, p.value.weight, &p.value.bias);
    std::vector<double> merged(Sq * D, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      std::vector<std::vector<double>> keys, values;
      for (std::size_t j = 0; j < Skv; ++j) {
        keys.emplace_back(K.begin() + j * D + h * dh, K.begin() + j * D + (h + 1) * dh);
        values.emplace_back(V.begin() + j * D + h * dh, V.begin() + j * D + (h + 1) * dh);
      }
      if (extra != nullptr) {
        for (const auto& k : (*extra)[b].keys[h]) keys.push_back(k);
        for (const auto& v : (*extra)[b].values[h]) values.push_back(v);
      }
      for (std::size_t i = 0; i < Sq; ++i) {
        std::vector<double> logits(keys.size());
        double mx = -INFINITY;
        for (std::size_t j = 0; j < keys.size(); ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += Q[i * D + h * dh + c] * keys[j][c];
          logits[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, logits[j]);
        }
        double z = 0.0;
        for (double& l : logits) {
          l = std::exp(l - mx);
          z += l;
        }
        for (double& l : logits) l /= z;
        if (weights_out != nullptr) weights_out->push_back(logits);
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (std::size_t j = 0; j < keys.size(); ++j) acc += logits[j] * values[j][c];
          merged[i * D + h * dh + c] = acc;
        }
      }
    }
    auto o = project(merged, Sq, p.output.weight, &p.output.bias);
    std::copy(o.begin(), o.end(), out.begin() + b * Sq * D);
  }
  return out;
}

}  // namespace oracle
