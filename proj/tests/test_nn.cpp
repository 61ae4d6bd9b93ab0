#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "retovla/grad_check.hpp"
#include "retovla/nn.hpp"

using namespace retovla;
using oracle::max_abs_diff;
using oracle::random_tensor;

namespace {

void zero_parameter(Tensor t) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), 0.0);
}

// Randomizes every parameter (including gains and biases) so gradient checks
// see no degenerate coordinates.
void randomize(ParameterStore& store, std::mt19937_64& rng, double stddev = 0.5) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (const auto& name : store.names()) {
    for (double& v : store.at(name).mutable_data()) v = dist(rng);
  }
}

std::vector<Tensor> all_params(const ParameterStore& store) {
  std::vector<Tensor> out;
  store.for_each([&](const std::string&, const Tensor& t) { out.push_back(t); });
  return out;
}

Tensor permute_sequence(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t B = x.dim(0), S = x.dim(1), D = x.dim(2);
  std::vector<double> v(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t d = 0; d < D; ++d) v[(b * S + s) * D + d] = x.data()[(b * S + perm[s]) * D + d];
  return Tensor(x.shape(), v);
}

}  // namespace

TEST_CASE("attention over a single key returns its projected value") {
  std::mt19937_64 rng(1);
  ParameterStore store;
  AttentionParams p = make_attention(store, "attn", 8, 2, rng);
  Tensor kv = random_tensor({1, 1, 8}, rng);
  Tensor q1 = random_tensor({1, 3, 8}, rng);
  Tensor q2 = random_tensor({1, 3, 8}, rng, false, 10.0);
  Tensor a = attention(q1, kv, p);
  Tensor b = attention(q2, kv, p);
  Tensor expected = linear(linear(kv, p.value), p.output);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t d = 0; d < 8; ++d) {
      CHECK(std::abs(a.at({0, i, d}) - expected.at({0, 0, d})) < 1e-12);
      CHECK(std::abs(b.at({0, i, d}) - expected.at({0, 0, d})) < 1e-12);
    }
}

TEST_CASE("attention matches explicit-loop oracle") {
  std::mt19937_64 rng(2);
  ParameterStore store;
  AttentionParams p = make_attention(store, "attn", 8, 2, rng);
  randomize(store, rng);
  Tensor x = random_tensor({1, 3, 8}, rng);
  CHECK(max_abs_diff(attention(x, x, p).data(), oracle::attention(x, x, p)) < 1e-10);

  Tensor q = random_tensor({2, 4, 8}, rng);
  Tensor kv = random_tensor({2, 6, 8}, rng);
  CHECK(max_abs_diff(attention(q, kv, p).data(), oracle::attention(q, kv, p)) < 1e-10);
}

TEST_CASE("attention with extra key-value entries matches oracle") {
  std::mt19937_64 rng(3);
  ParameterStore store;
  AttentionParams p = make_attention(store, "attn", 8, 2, rng);
  Tensor q = random_tensor({2, 3, 8}, rng);
  Tensor kv = random_tensor({2, 5, 8}, rng);
  AttentionKV extra{random_tensor({2, 2, 2, 4}, rng), random_tensor({2, 2, 2, 4}, rng)};
  std::vector<oracle::ExtraKV> ex(2);
  for (std::size_t b = 0; b < 2; ++b) {
    ex[b].keys.resize(2);
    ex[b].values.resize(2);
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t s = 0; s < 2; ++s) {
        std::vector<double> k(4), v(4);
        for (std::size_t c = 0; c < 4; ++c) {
          k[c] = extra.keys.at({b, h, s, c});
          v[c] = extra.values.at({b, h, s, c});
        }
        ex[b].keys[h].push_back(k);
        ex[b].values[h].push_back(v);
      }
  }
  CHECK(max_abs_diff(attention(q, kv, p, extra).data(), oracle::attention(q, kv, p, &ex)) < 1e-10);
}

TEST_CASE("attention is invariant under key/value sequence permutation") {
  std::mt19937_64 rng(4);
  ParameterStore store;
  AttentionParams p = make_attention(store, "attn", 16, 4, rng);
  Tensor q = random_tensor({2, 3, 16}, rng);
  Tensor kv = random_tensor({2, 9, 16}, rng);
  Tensor ref = attention(q, kv, p);
  std::vector<std::size_t> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = 0; i < 10; ++i) {
    std::shuffle(perm.begin(), perm.end(), rng);
    CHECK(max_abs_diff(attention(q, permute_sequence(kv, perm), p).data(), ref.data()) < 1e-9);
  }
}

TEST_CASE("empty extra key-value set leaves attention unchanged") {
  std::mt19937_64 rng(5);
  ParameterStore store;
  AttentionParams p = make_attention(store, "attn", 8, 2, rng);
  Tensor q = random_tensor({2, 3, 8}, rng);
  Tensor kv = random_tensor({2, 4, 8}, rng);
  AttentionKV empty{Tensor::zeros({2, 2, 0, 4}), Tensor::zeros({2, 2, 0, 4})};
  CHECK(max_abs_diff(attention(q, kv, p, empty).data(), attention(q, kv, p).data()) < 1e-15);
}

TEST_CASE("attention errors") {
  std::mt19937_64 rng(6);
  ParameterStore store;
  AttentionParams p = make_attention(store, "attn", 8, 2, rng);
  CHECK_THROWS_AS((void)attention(Tensor::zeros({1, 2, 6}), Tensor::zeros({1, 2, 8}), p), ShapeError);
  CHECK_THROWS_AS((void)attention(Tensor::zeros({1, 2, 8}), Tensor::zeros({2, 2, 8}), p), ShapeError);
  AttentionKV wrong_heads{Tensor::zeros({1, 4, 1, 2}), Tensor::zeros({1, 4, 1, 2})};
  CHECK_THROWS_AS((void)attention(Tensor::zeros({1, 2, 8}), Tensor::zeros({1, 2, 8}), p, wrong_heads), ShapeError);
  ParameterStore s2;
  CHECK_THROWS_AS((void)make_attention(s2, "bad", 10, 3, rng), std::invalid_argument);
}

TEST_CASE("encoder block preserves shape and is identity with zeroed output projections") {
  std::mt19937_64 rng(7);
  ParameterStore store;
  BlockParams blk = make_encoder_block(store, "enc", 64, 4, rng);
  Tensor x = random_tensor({2, 10, 64}, rng);
  CHECK(encoder_block(x, blk).shape() == x.shape());

  zero_parameter(blk.self_attn.output.weight);
  zero_parameter(blk.self_attn.output.bias);
  zero_parameter(blk.ffn.down.weight);
  zero_parameter(blk.ffn.down.bias);
  CHECK(max_abs_diff(encoder_block(x, blk).data(), x.data()) == 0.0);

  for (std::size_t b : {1u, 3u})
    for (std::size_t s : {1u, 7u}) CHECK(encoder_block(random_tensor({b, s, 64}, rng), blk).shape() == Shape{b, s, 64});
}

TEST_CASE("decoder block variants") {
  std::mt19937_64 rng(8);
  ParameterStore store;
  BlockParams blk = make_decoder_block(store, "dec", 16, 4, rng);
  Tensor x = random_tensor({2, 5, 16}, rng);
  Tensor ctx = random_tensor({2, 7, 16}, rng);
  CHECK(decoder_block(x, ctx, blk).shape() == x.shape());
  CHECK(max_abs_diff(decoder_block(x, ctx, blk, std::nullopt).data(), decoder_block(x, ctx, blk).data()) == 0.0);

  // Zero value projection and output bias: cross-attention adds nothing.
  zero_parameter(blk.cross_attn.value.weight);
  Tensor one = random_tensor({2, 1, 16}, rng);
  Tensor y = decoder_block(x, one, blk);
  Tensor h = layernorm(x, blk.norm_attn);
  Tensor r = add(x, attention(h, h, blk.self_attn));
  Tensor expected = add(r, feed_forward(layernorm(r, blk.norm_ffn), blk.ffn));
  CHECK(max_abs_diff(y.data(), expected.data()) < 1e-14);
}

TEST_CASE("block gradients pass grad_check") {
  std::mt19937_64 rng(9);
  {
    ParameterStore store;
    BlockParams blk = make_encoder_block(store, "enc", 8, 2, rng);
    randomize(store, rng);
    Tensor x = random_tensor({2, 3, 8}, rng, true);
    Tensor w = random_tensor({2, 3, 8}, rng);
    auto inputs = all_params(store);
    inputs.push_back(x);
    CHECK(grad_check([&] { return sum(mul(encoder_block(x, blk), w)); }, inputs, 1e-5) < 1e-5);
  }
  {
    ParameterStore store;
    BlockParams blk = make_decoder_block(store, "dec", 8, 2, rng);
    randomize(store, rng);
    Tensor x = random_tensor({2, 3, 8}, rng, true);
    Tensor ctx = random_tensor({2, 4, 8}, rng, true);
    AttentionKV extra{random_tensor({2, 2, 2, 4}, rng, true), random_tensor({2, 2, 2, 4}, rng, true)};
    Tensor w = random_tensor({2, 3, 8}, rng);
    auto inputs = all_params(store);
    inputs.insert(inputs.end(), {x, ctx, extra.keys, extra.values});
    CHECK(grad_check([&] { return sum(mul(decoder_block(x, ctx, blk, extra), w)); }, inputs, 1e-5) < 1e-5);
  }
}

TEST_CASE("positional encoding") {
  Tensor pe = positional_encoding(8, 64);
  for (std::size_t j = 0; j < 64; ++j) CHECK(pe.at({0, j}) == (j % 2 == 0 ? 0.0 : 1.0));
  for (double v : positional_encoding(50, 32).data()) CHECK((v >= -1.0 && v <= 1.0));
  for (std::size_t p = 0; p < 8; ++p)
    for (std::size_t i = 0; i < 32; ++i) {
      const double freq = std::exp(-std::log(10000.0) * (2.0 * i) / 64.0);
      CHECK(std::abs(pe.at({p, 2 * i}) - std::sin(p * freq)) < 1e-12);
      CHECK(std::abs(pe.at({p, 2 * i + 1}) - std::cos(p * freq)) < 1e-12);
    }
  CHECK_THROWS((void)positional_encoding(0, 8));
}

TEST_CASE("time embedding") {
  Tensor t0 = time_embedding(0.0, 16);
  Tensor row0 = positional_encoding(1, 16);
  CHECK(max_abs_diff(t0.data(), row0.data()) == 0.0);

  Tensor a = time_embedding(0.1, 16);
  Tensor b = time_embedding(0.9, 16);
  double d = 0.0;
  for (std::size_t i = 0; i < 16; ++i) d += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
  CHECK(d > 0.0);

  Tensor h = time_embedding(0.5, 16);
  for (std::size_t i = 0; i < 8; ++i) {
    const double freq = std::exp(-std::log(10000.0) * (2.0 * i) / 16.0);
    CHECK(std::abs(h.data()[2 * i] - std::sin(500.0 * freq)) < 1e-12);
    CHECK(std::abs(h.data()[2 * i + 1] - std::cos(500.0 * freq)) < 1e-12);
  }
  CHECK_THROWS_AS((void)time_embedding(1.5, 16), std::out_of_range);
  CHECK_THROWS_AS((void)time_embedding(-0.1, 16), std::out_of_range);
}
