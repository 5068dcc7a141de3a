#include <cmath>

#include "ch4/conformer/conformer.hpp"
#include "ch4/error.hpp"
#include "ch4/numerics/grad_check.hpp"
#include "ch4/numerics/ops.hpp"
#include "doctest.h"
#include "unit/test_util.hpp"

using namespace ch4;
using ch4::testing::random_tensor;
using ch4::testing::weighted;

namespace {

EncoderConfig toy_config(std::size_t d, std::vector<BlockSpec> layers, std::size_t F = 6, std::size_t vocab = 5) {
  EncoderConfig cfg;
  cfg.feature_dim = F;
  cfg.d = d;
  cfg.mhsa_heads = 2;
  cfg.h3_heads = 2;
  cfg.diag_state = 4;
  cfg.vocab = vocab;
  cfg.dropout = 0.0;
  cfg.layers = std::move(layers);
  return cfg;
}

BlockSpec spec(MixerKind kind, bool causal, std::size_t kernel = 3) {
  BlockSpec s;
  s.mixer = kind;
  s.causal = causal;
  s.conv_kernel = kernel;
  return s;
}

Tensor block_forward(const ConformerBlock& block, const Tensor& x) {
  Tape tape(false);
  Context ctx(tape);
  return block.forward(ctx, ctx.input(x)).value();
}

Tensor mixer_forward(const ConformerBlock& block, const Tensor& x) {
  Tape tape(false);
  Context ctx(tape);
  return block.mixer_forward(ctx, ctx.input(x)).value();
}

Tensor columns(const Tensor& x, std::size_t begin, std::size_t end) {
  Tensor out({x.rows(), end - begin});
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (std::size_t c = begin; c < end; ++c) out(t, c - begin) = x(t, c);
  return out;
}

// Largest change in rows [0, rows) between two outputs.
double prefix_diff(const Tensor& a, const Tensor& b, std::size_t rows) {
  double m = 0.0;
  for (std::size_t t = 0; t < rows; ++t)
    for (std::size_t c = 0; c < a.cols(); ++c) m = std::max(m, std::abs(a(t, c) - b(t, c)));
  return m;
}

std::size_t h3_count(std::size_t d, std::size_t heads, std::size_t ns, std::size_t nd, std::size_t groups) {
  (void)heads;
  return 4 * d * d + d * ns + d + groups * (6 * nd + 1);
}

// Parameter count from the architecture description alone.
std::size_t hand_count(const EncoderConfig& c) {
  const std::size_t d = c.d;
  std::size_t n = 3 * c.feature_dim * d + d + 3 * d * d + d;
  for (const BlockSpec& s : c.layers) {
    n += 2 * d + d * 4 * d + 4 * d + 4 * d * d + d;  // ffn
    n += 2 * d;                                      // mixer norm
    const std::size_t dm = s.mixer == MixerKind::mhsa ? d : s.mixer == MixerKind::h3 ? 0 : s.d_mhsa;
    const std::size_t dh3 = d - dm;
    n += 4 * dm * dm;
    if (dh3) {
      const std::size_t dh = dh3 / c.h3_heads;
      const std::size_t groups = c.diag_sharing == DiagSharing::per_head ? c.h3_heads : c.h3_heads * dh * dh;
      n += h3_count(dh3, c.h3_heads, c.shift_state, c.diag_state, groups);
    }
    n += 2 * d + 2 * d * d + 2 * d + s.conv_kernel * d + d + 2 * d + d * d + d;  // conv
  }
  return n + 2 * d + d * (c.vocab + 1) + c.vocab + 1;
}

}  // namespace

TEST_CASE("zeroed branch projections make a block the identity") {
  std::mt19937_64 rng(1);
  for (auto kind : {MixerKind::mhsa, MixerKind::h3}) {
    for (bool causal : {false, true}) {
      const EncoderConfig cfg = toy_config(8, {spec(kind, causal)});
      ConformerBlock block = ConformerBlock::random(cfg.layers[0], cfg, rng);
      block.ffn.down.w = Tensor::zeros_like(block.ffn.down.w);
      block.ffn.down.b = Tensor::zeros_like(block.ffn.down.b);
      if (block.mhsa) block.mhsa->wo = Tensor::zeros_like(block.mhsa->wo);
      if (block.h3) block.h3->wo = Tensor::zeros_like(block.h3->wo);
      block.conv.pointwise_out.w = Tensor::zeros_like(block.conv.pointwise_out.w);
      block.conv.pointwise_out.b = Tensor::zeros_like(block.conv.pointwise_out.b);
      const Tensor x = random_tensor({9, 8}, rng);
      CHECK(block_forward(block, x) == x);
    }
  }
}

TEST_CASE("causal blocks are causal for every mixer") {
  std::mt19937_64 rng(2);
  for (BlockSpec s : {spec(MixerKind::mhsa, true, 5), spec(MixerKind::h3, true, 5), BlockSpec::parallel(4, 4, true)}) {
    s.causal = true;
    const EncoderConfig cfg = toy_config(8, {s});
    const ConformerBlock block = ConformerBlock::random(s, cfg, rng);
    const Tensor x = random_tensor({30, 8}, rng);
    const Tensor base = block_forward(block, x);
    for (std::size_t t : {0u, 11u, 29u}) {
      Tensor xp = x;
      for (std::size_t c = 0; c < 8; ++c) xp(t, c) -= 2.0;
      const Tensor y = block_forward(block, xp);
      CHECK(prefix_diff(base, y, t) < 1e-12);
      CHECK(max_abs_diff(base, y) > 1e-6);
    }
  }
}

TEST_CASE("offline blocks see the future") {
  std::mt19937_64 rng(3);
  const EncoderConfig cfg = toy_config(8, {spec(MixerKind::mhsa, false, 5)});
  const ConformerBlock block = ConformerBlock::random(cfg.layers[0], cfg, rng);
  const Tensor x = random_tensor({12, 8}, rng);
  Tensor xp = x;
  xp(11, 0) += 1.0;
  CHECK(prefix_diff(block_forward(block, x), block_forward(block, xp), 1) > 1e-8);
}

TEST_CASE("parallel mixer splits channels between standalone layers") {
  std::mt19937_64 rng(4);
  const EncoderConfig cfg = toy_config(8, {BlockSpec::parallel(2, 6, true)});
  const ConformerBlock block = ConformerBlock::random(cfg.layers[0], cfg, rng);
  const Tensor x = random_tensor({20, 8}, rng);
  const Tensor y = mixer_forward(block, x);
  CHECK(max_abs_diff(columns(y, 0, 2), mhsa_forward(*block.mhsa, columns(x, 0, 2), AttentionMode::causal)) < 1e-12);
  CHECK(max_abs_diff(columns(y, 2, 8), h3_forward(*block.h3, columns(x, 2, 8))) < 1e-12);
}

TEST_CASE("zero-width parallel parts reduce to the single-mixer blocks") {
  std::mt19937_64 rng(5);
  for (bool causal : {false, true}) {
    const EncoderConfig pcfg = toy_config(8, {BlockSpec::parallel(8, 0, causal)});
    const ConformerBlock parallel = ConformerBlock::random(pcfg.layers[0], pcfg, rng);
    ConformerBlock mhsa = ConformerBlock::random(spec(MixerKind::mhsa, causal), pcfg, rng);
    mhsa.spec.conv_kernel = parallel.spec.conv_kernel;
    mhsa.ffn = parallel.ffn;
    mhsa.mixer_norm = parallel.mixer_norm;
    mhsa.mhsa = parallel.mhsa;
    mhsa.conv = parallel.conv;
    const Tensor x = random_tensor({10, 8}, rng);
    CHECK(block_forward(parallel, x) == block_forward(mhsa, x));

    const EncoderConfig hcfg = toy_config(8, {BlockSpec::parallel(0, 8, causal)});
    const ConformerBlock hpar = ConformerBlock::random(hcfg.layers[0], hcfg, rng);
    ConformerBlock h3 = ConformerBlock::random(spec(MixerKind::h3, causal), hcfg, rng);
    h3.ffn = hpar.ffn;
    h3.mixer_norm = hpar.mixer_norm;
    h3.h3 = hpar.h3;
    h3.conv = hpar.conv;
    CHECK(block_forward(hpar, x) == block_forward(h3, x));
  }
}

TEST_CASE("invalid configurations are rejected") {
  CHECK_THROWS_AS(toy_config(8, {BlockSpec::parallel(3, 4)}).validate(), ConfigError);
  CHECK_THROWS_AS(toy_config(8, {BlockSpec::parallel(3, 5)}).validate(), ConfigError);
  CHECK_THROWS_AS(toy_config(8, {}).validate(), ConfigError);
  CHECK_THROWS_AS(toy_config(8, {spec(MixerKind::mhsa, true), spec(MixerKind::h3, false)}).validate(), ConfigError);
  CHECK_THROWS_AS(toy_config(8, {spec(MixerKind::mhsa, false, 4)}).validate(), ConfigError);
  CHECK_THROWS_AS(parse_mixer_kind("rnn"), ConfigError);
  CHECK_NOTHROW(toy_config(8, {BlockSpec::parallel(0, 8), BlockSpec::parallel(8, 0)}).validate());
}

TEST_CASE("CH4 placement") {
  const EncoderConfig top = make_ch4_config(12, H3Placement::top(10));
  for (std::size_t i = 0; i < 12; ++i) CHECK(top.layers[i].mixer == (i >= 2 ? MixerKind::h3 : MixerKind::mhsa));
  for (const BlockSpec& s : make_ch4_config(12, H3Placement::top(0)).layers) CHECK(s.mixer == MixerKind::mhsa);
  const EncoderConfig t6 = make_ch4_config(12, H3Placement::top(6)), b6 = make_ch4_config(12, H3Placement::bottom(6));
  for (std::size_t i = 0; i < 12; ++i) CHECK((t6.layers[i].mixer == MixerKind::h3) != (b6.layers[i].mixer == MixerKind::h3));
  const EncoderConfig m = make_ch4_config(3, H3Placement::explicit_mask({true, false, true}));
  CHECK(m.layers[1].mixer == MixerKind::mhsa);
  CHECK(m.layers[2].mixer == MixerKind::h3);
  CHECK_THROWS_AS(make_ch4_config(4, H3Placement::top(5)), ConfigError);
  CHECK_THROWS_AS(make_ch4_config(4, H3Placement::explicit_mask({true})), ConfigError);
  EncoderConfig base;
  base.layers = {spec(MixerKind::mhsa, true, 7)};
  const EncoderConfig causal = make_ch4_config(4, H3Placement::bottom(1), base);
  for (const BlockSpec& s : causal.layers) {
    CHECK(s.causal);
    CHECK(s.conv_kernel == 7);
  }
}

TEST_CASE("encoder output shape") {
  std::mt19937_64 rng(6);
  EncoderConfig cfg = toy_config(32, {spec(MixerKind::mhsa, false), spec(MixerKind::h3, false)}, 16, 10);
  const Encoder enc = Encoder::random(cfg, rng);
  CHECK(encoder_forward(enc, random_tensor({40, 16}, rng)).shape() == Shape{10, 11});
  for (std::size_t T : {1u, 5u, 37u, 41u}) {
    const std::size_t rows = encoder_forward(enc, random_tensor({T, 16}, rng)).rows();
    const std::size_t doubled = encoder_forward(enc, random_tensor({2 * T, 16}, rng)).rows();
    CHECK(rows == (T + 3) / 4);
    CHECK(std::abs(static_cast<long>(doubled) - 2 * static_cast<long>(rows)) <= 1);
  }
  CHECK_THROWS_AS(encoder_forward(enc, Tensor({8, 15})), ShapeError);
  Tensor bad = random_tensor({8, 16}, rng);
  bad(3, 3) = INFINITY;
  CHECK_THROWS_AS(encoder_forward(enc, bad), NumericError);
}

TEST_CASE("positions are sinusoidal") {
  const Tensor pe = sinusoidal_positions(3, 4, 5);
  CHECK(pe(0, 0) == doctest::Approx(std::sin(5.0)));
  CHECK(pe(0, 1) == doctest::Approx(std::cos(5.0)));
  CHECK(pe(2, 2) == doctest::Approx(std::sin(7.0 / 100.0)));
  CHECK(pe(2, 3) == doctest::Approx(std::cos(7.0 / 100.0)));
}

TEST_CASE("causal encoder logits ignore later frames") {
  std::mt19937_64 rng(7);
  const EncoderConfig cfg = toy_config(8, {spec(MixerKind::mhsa, true), spec(MixerKind::h3, true), BlockSpec::parallel(4, 4, true)});
  const Encoder enc = Encoder::random(cfg, rng);
  const Tensor x = random_tensor({50, 6}, rng);
  const Tensor base = encoder_forward(enc, x);
  for (std::size_t t : {0u, 3u, 4u, 17u, 44u}) {
    Tensor xp = x;
    for (std::size_t s = t + 1; s < 50; ++s)
      for (std::size_t c = 0; c < 6; ++c) xp(s, c) += 1.0;
    const Tensor y = encoder_forward(enc, xp);
    CHECK(prefix_diff(base, y, t / 4 + 1) < 1e-12);
    CHECK(max_abs_diff(base, y) > 1e-6);
  }
}

TEST_CASE("evaluation is deterministic and training mode draws dropout") {
  std::mt19937_64 rng(8);
  EncoderConfig cfg = toy_config(8, {spec(MixerKind::mhsa, true)});
  cfg.dropout = 0.3;
  const Encoder enc = Encoder::random(cfg, rng);
  const Tensor x = random_tensor({20, 6}, rng);
  CHECK(encoder_forward(enc, x) == encoder_forward(enc, x));
  Tape tape(false);
  Context ctx(tape, nullptr, true, 9);
  CHECK(max_abs_diff(enc.forward(ctx, ctx.input(x)).value(), encoder_forward(enc, x)) > 1e-6);
}

TEST_CASE("parameter count matches a hand count") {
  std::mt19937_64 rng(9);
  std::vector<EncoderConfig> configs{
      toy_config(8, {spec(MixerKind::mhsa, true), spec(MixerKind::h3, true)}),
      toy_config(12, {BlockSpec::parallel(4, 8), BlockSpec::parallel(8, 4)}),
      make_ch4_config(12, H3Placement::top(10)),
  };
  configs[1].diag_sharing = DiagSharing::per_entry;
  for (const EncoderConfig& cfg : configs) CHECK(Encoder::random(cfg, rng).parameter_count() == hand_count(cfg));
}

TEST_CASE("block gradients match finite differences") {
  std::mt19937_64 rng(10);
  std::vector<BlockSpec> specs{spec(MixerKind::mhsa, true), spec(MixerKind::h3, true), BlockSpec::parallel(2, 6, true),
                               spec(MixerKind::mhsa, false)};
  for (const BlockSpec& s : specs) {
    const EncoderConfig cfg = toy_config(8, {s});
    ConformerBlock block = ConformerBlock::random(s, cfg, rng);
    Tensor x = random_tensor({12, 8}, rng);
    const Tensor r = random_tensor({12, 8}, rng);
    std::vector<Tensor*> params{&x};
    // Under batch statistics the depthwise bias is removed by the per-channel
    // mean, so its gradient is exactly zero and is left out.
    block.visit("b", [&](const std::string& name, Tensor& t, bool trainable) {
      if (trainable && (s.causal || name != "b.conv.depthwise.b")) params.push_back(&t);
    });
    // Training mode exercises batch statistics in the offline block.
    const auto result = grad_check_params(
        [&](Context& ctx) {
          ctx.set_training(true);
          return weighted(block.forward(ctx, ctx.param(x)), r);
        },
        params);
    INFO(to_string(s.mixer) << " causal=" << s.causal << " param " << result.worst_param << "[" << result.worst_index
                            << "] " << result.analytic << " vs " << result.numeric);
    CHECK(result.max_relative_error < 1e-4);
  }
}

TEST_CASE("toy encoder gradients match finite differences") {
  std::mt19937_64 rng(11);
  Encoder enc = Encoder::random(toy_config(4, {spec(MixerKind::mhsa, true), spec(MixerKind::h3, true)}, 3, 3), rng);
  const Tensor x = random_tensor({10, 3}, rng);
  const Tensor r = random_tensor({3, 4}, rng);
  std::vector<Tensor*> params;
  enc.visit([&](const std::string&, Tensor& t, bool trainable) {
    if (trainable) params.push_back(&t);
  });
  const auto result =
      grad_check_params([&](Context& ctx) { return weighted(enc.forward(ctx, ctx.input(x)), r); }, params);
  INFO(result.worst_param << "[" << result.worst_index << "] " << result.analytic << " vs " << result.numeric);
  CHECK(result.max_relative_error < 1e-4);
}

TEST_CASE("streaming encoder reproduces the full causal pass") {
  std::mt19937_64 rng(12);
  std::vector<EncoderConfig> configs{
      toy_config(8, {spec(MixerKind::mhsa, true, 5)}),
      toy_config(8, {spec(MixerKind::h3, true, 1), spec(MixerKind::h3, true, 4)}),
      toy_config(8, {BlockSpec::parallel(2, 6, true), BlockSpec::parallel(6, 2, true), BlockSpec::parallel(0, 8, true)}),
  };
  for (auto& s : configs[2].layers) s.conv_kernel = 3;
  for (const EncoderConfig& cfg : configs) {
    const Encoder enc = Encoder::random(cfg, rng);
    for (std::size_t T : {1u, 4u, 63u, 130u}) {
      const Tensor x = random_tensor({T, 6}, rng);
      CHECK(max_abs_diff(encoder_stream(enc, x), encoder_forward(enc, x)) < 1e-9);
    }
  }
  const Encoder offline = Encoder::random(toy_config(8, {spec(MixerKind::mhsa, false)}), rng);
  CHECK_THROWS_AS(EncoderStream{offline}, ConfigError);
}

TEST_CASE("FFN weight group statistics") {
  std::mt19937_64 rng(13);
  EncoderConfig cfg = toy_config(64, {BlockSpec::parallel(32, 32, true), BlockSpec::parallel(16, 48, true),
                                      BlockSpec::parallel(48, 16, true)});
  Encoder enc = Encoder::random(cfg, rng);
  const auto stats = ffn_weight_group_stats(enc);
  REQUIRE(stats.size() == 2);
  for (const auto& s : stats) CHECK(std::abs(s.mhsa_mean - s.h3_mean) < 0.1 * s.mhsa_mean);
  Tensor& w = enc.blocks[2].ffn.up.w;
  for (std::size_t r = 16; r < 64; ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) w(r, c) = 0.0;
  CHECK(ffn_weight_group_stats(enc)[1].h3_mean == 0.0);
  CHECK(ffn_weight_group_stats(enc)[1].mhsa_mean > 0.0);
  CHECK_THROWS_AS(ffn_weight_group_stats(Encoder::random(toy_config(8, {spec(MixerKind::mhsa, true)}), rng)), ConfigError);
}
