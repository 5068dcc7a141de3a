#include <cmath>
#include <numeric>

#include "ch4/attention/attention.hpp"
#include "ch4/error.hpp"
#include "ch4/numerics/grad_check.hpp"
#include "ch4/numerics/ops.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "unit/test_util.hpp"

using namespace ch4;
using namespace ch4::oracle;
using ch4::testing::random_tensor;
using ch4::testing::weighted;

TEST_CASE("single-step attention reduces to the value path") {
  std::mt19937_64 rng(31);
  const MhsaLayer layer = MhsaLayer::random(8, 2, rng);
  const Tensor x = random_tensor({1, 8}, rng);
  const Tensor expected = matmul(matmul(x, layer.wv), layer.wo);
  for (auto mode : {AttentionMode::bidirectional, AttentionMode::causal})
    CHECK(max_abs_diff(mhsa_forward(layer, x, mode), expected) < 1e-14);
}

TEST_CASE("identical rows give identical outputs") {
  std::mt19937_64 rng(32);
  const MhsaLayer layer = MhsaLayer::random(8, 4, rng);
  const Tensor row = random_tensor({1, 8}, rng);
  Tensor x({5, 8});
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 8; ++c) x(r, c) = row(0, c);
  const Tensor y = mhsa_forward(layer, x, AttentionMode::bidirectional);
  for (std::size_t r = 1; r < 5; ++r)
    for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(y(r, c) - y(0, c)) < 1e-14);
}

TEST_CASE("MHSA equals the nested-loop similarity form") {
  std::mt19937_64 rng(33);
  {
    const MhsaLayer layer = MhsaLayer::random(4, 1, rng);
    const Tensor x = random_tensor({6, 4}, rng);
    CHECK(max_abs_diff(mhsa_forward(layer, x, AttentionMode::causal), brute_force_mhsa(layer, x, true)) < 1e-10);
  }
  const MhsaLayer layer = MhsaLayer::random(12, 3, rng);
  const Tensor x = random_tensor({9, 12}, rng);
  CHECK(max_abs_diff(mhsa_forward(layer, x, AttentionMode::bidirectional), brute_force_mhsa(layer, x, false)) < 1e-10);
}

TEST_CASE("softmax weights sum to one") {
  std::mt19937_64 rng(34);
  const Tensor q = random_tensor({7, 6}, rng, 3.0), k = random_tensor({7, 6}, rng, 3.0);
  const Tensor ones({7, 6}, 1.0);
  for (auto mode : {AttentionMode::bidirectional, AttentionMode::causal}) {
    Tape tape(false);
    const Tensor y =
        ops::softmax_attention(tape.constant(q), tape.constant(k), tape.constant(ones), 2, mode).value();
    for (double v : y.data()) CHECK(std::abs(v - 1.0) < 1e-12);
  }
}

TEST_CASE("causal attention ignores later rows") {
  std::mt19937_64 rng(35);
  const MhsaLayer layer = MhsaLayer::random(8, 2, rng);
  const Tensor x = random_tensor({10, 8}, rng);
  const Tensor y = mhsa_forward(layer, x, AttentionMode::causal);
  const Tensor lin = linear_attention_forward(x, x, x);
  for (std::size_t t : {0, 4, 9}) {
    Tensor p = x;
    for (std::size_t c = 0; c < 8; ++c) p(t, c) += 3.0;
    const Tensor y2 = mhsa_forward(layer, p, AttentionMode::causal);
    const Tensor lin2 = linear_attention_forward(p, p, p);
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t c = 0; c < 8; ++c) {
        CHECK(std::abs(y2(s, c) - y(s, c)) < 1e-12);
        CHECK(std::abs(lin2(s, c) - lin(s, c)) < 1e-12);
      }
  }
}

TEST_CASE("bidirectional attention is permutation equivariant") {
  std::mt19937_64 rng(36);
  const MhsaLayer layer = MhsaLayer::random(8, 2, rng);
  const Tensor x = random_tensor({6, 8}, rng);
  std::vector<std::size_t> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor px({6, 8});
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 8; ++c) px(r, c) = x(perm[r], c);
  const Tensor y = mhsa_forward(layer, x, AttentionMode::bidirectional);
  const Tensor py = mhsa_forward(layer, px, AttentionMode::bidirectional);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(py(r, c) - y(perm[r], c)) < 1e-12);
}

TEST_CASE("streaming attention matches the causal full pass") {
  std::mt19937_64 rng(37);
  const MhsaLayer layer = MhsaLayer::random(8, 4, rng);
  const Tensor x = random_tensor({20, 8}, rng);
  const Tensor y = mhsa_forward(layer, x, AttentionMode::causal);
  MhsaStreamState state;
  for (std::size_t t = 0; t < 20; ++t) {
    const auto out = mhsa_step(layer, state, x.row(t));
    CHECK(max_abs_diff(out, y.row(t)) < 1e-12);
  }
}

TEST_CASE("linear attention examples") {
  std::mt19937_64 rng(38);
  const Tensor q1 = random_tensor({1, 4}, rng), k1 = random_tensor({1, 4}, rng), v1 = random_tensor({1, 3}, rng);
  CHECK(max_abs_diff(linear_attention_forward(q1, k1, v1), v1) < 1e-15);

  const Tensor q = random_tensor({8, 4}, rng), k = random_tensor({8, 4}, rng), v = random_tensor({8, 4}, rng);
  const FeatureMap phi = FeatureMap::positive();
  CHECK(max_abs_diff(linear_attention_forward(q, k, v), brute_force_linear(q, k, v, phi)) < 1e-10);

  Tensor kc({8, 4});
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 4; ++c) kc(r, c) = k(0, c);
  const Tensor y = linear_attention_forward(q, kc, v);
  std::vector<double> mean(4, 0.0);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      mean[c] += (v(r, c) - mean[c]) / static_cast<double>(r + 1);
      CHECK(std::abs(y(r, c) - mean[c]) < 1e-12);
    }
}

TEST_CASE("linear attention rejects a vanishing denominator") {
  const FeatureMap identity{[](double x) { return x; }};
  const Tensor q = Tensor::matrix(1, 2, {1.0, -1.0}), k = Tensor::matrix(1, 2, {1.0, 1.0});
  CHECK_THROWS_AS(linear_attention_forward(q, k, Tensor::matrix(1, 1, {1.0}), identity), NumericError);
}

TEST_CASE("head count must divide the dimension") {
  std::mt19937_64 rng(39);
  CHECK_THROWS_AS(MhsaLayer::random(10, 4, rng), ConfigError);
  const MhsaLayer layer = MhsaLayer::random(8, 2, rng);
  CHECK_THROWS_AS(mhsa_forward(layer, Tensor({3, 6}), AttentionMode::causal), ShapeError);
}

TEST_CASE("attention gradients match finite differences") {
  std::mt19937_64 rng(40);
  for (auto mode : {AttentionMode::bidirectional, AttentionMode::causal}) {
    const MhsaLayer base = MhsaLayer::random(6, 2, rng);
    const Tensor x = random_tensor({5, 6}, rng), r = random_tensor({5, 6}, rng);
    const auto result = grad_check(
        [&](Tape& tape, std::span<const Var> p) {
          Var q = ops::matmul(p[4], p[0]), k = ops::matmul(p[4], p[1]), v = ops::matmul(p[4], p[2]);
          (void)tape;
          return weighted(ops::matmul(ops::softmax_attention(q, k, v, 2, mode), p[3]), r);
        },
        {base.wq, base.wk, base.wv, base.wo, x});
    CHECK(result.max_relative_error < 1e-4);
  }

  // Row 0 of linear attention is V_0 whatever Q_0 is, so Q is checked through
  // a projection of a shared input, as in a real layer.
  const Tensor x = random_tensor({7, 4}, rng);
  const Tensor wq = random_tensor({4, 3}, rng), wk = random_tensor({4, 3}, rng), wv = random_tensor({4, 2}, rng);
  const Tensor r = random_tensor({7, 2}, rng);
  const auto result = grad_check(
      [&](Tape&, std::span<const Var> p) {
        Var q = ops::matmul(p[0], p[1]), k = ops::matmul(p[0], p[2]), v = ops::matmul(p[0], p[3]);
        return weighted(ops::linear_attention(ops::positive_feature(q), ops::positive_feature(k), v), r);
      },
      {x, wq, wk, wv});
  INFO(result.worst_param << " " << result.worst_index << " " << result.analytic << " " << result.numeric);
  CHECK(result.max_relative_error < 1e-4);
}
