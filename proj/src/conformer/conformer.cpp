#include "ch4/conformer/conformer.hpp"

#include <cmath>
#include <limits>

#include "ch4/error.hpp"
#include "ch4/numerics/ops.hpp"

namespace ch4 {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kRunningMomentum = 0.1;

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

Var branch_dropout(Context& ctx, Var x, double rate) {
  return ctx.training() ? ops::dropout(x, rate, ctx.rng()) : x;
}

}  // namespace

std::string to_string(MixerKind kind) {
  switch (kind) {
    case MixerKind::mhsa: return "mhsa";
    case MixerKind::h3: return "h3";
    case MixerKind::parallel: return "parallel";
  }
  return "?";
}

MixerKind parse_mixer_kind(const std::string& name) {
  if (name == "mhsa") return MixerKind::mhsa;
  if (name == "h3") return MixerKind::h3;
  if (name == "parallel") return MixerKind::parallel;
  throw ConfigError("unknown mixer '" + name + "'");
}

BlockSpec BlockSpec::parallel(std::size_t d_mhsa, std::size_t d_h3, bool causal) {
  BlockSpec s;
  s.mixer = MixerKind::parallel;
  s.d_mhsa = d_mhsa;
  s.d_h3 = d_h3;
  s.causal = causal;
  return s;
}

void EncoderConfig::validate() const {
  if (feature_dim == 0 || d == 0) throw ConfigError("encoder: feature and model dimensions must be positive");
  if (vocab == 0) throw ConfigError("encoder: vocab must be positive");
  if (subsample != 4) throw ConfigError("encoder: only a subsampling factor of 4 is supported");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("encoder: dropout must lie in [0, 1)");
  if (layers.empty()) throw ConfigError("encoder: at least one layer is required");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const BlockSpec& s = layers[i];
    const std::string where = "encoder layer " + std::to_string(i + 1) + ": ";
    if (s.causal != layers.front().causal) throw ConfigError(where + "all layers must share the causal flag");
    if (s.conv_kernel == 0) throw ConfigError(where + "conv kernel width must be positive");
    if (!s.causal && s.conv_kernel % 2 == 0) throw ConfigError(where + "offline conv kernel width must be odd");
    switch (s.mixer) {
      case MixerKind::mhsa:
        if (d % mhsa_heads) throw ConfigError(where + "d not divisible by mhsa_heads");
        break;
      case MixerKind::h3:
        if (d % h3_heads) throw ConfigError(where + "d not divisible by h3_heads");
        break;
      case MixerKind::parallel:
        if (s.d_mhsa + s.d_h3 != d)
          throw ConfigError(where + "parallel split " + std::to_string(s.d_mhsa) + "+" + std::to_string(s.d_h3) +
                            " does not sum to d = " + std::to_string(d));
        if (s.d_mhsa % mhsa_heads) throw ConfigError(where + "d_mhsa not divisible by mhsa_heads");
        if (s.d_h3 % h3_heads) throw ConfigError(where + "d_h3 not divisible by h3_heads");
        break;
    }
  }
}

EncoderConfig make_ch4_config(std::size_t total_layers, const H3Placement& placement, EncoderConfig base) {
  if (total_layers == 0) throw ConfigError("make_ch4_config: no layers");
  std::vector<bool> h3(total_layers, false);
  switch (placement.kind) {
    case H3Placement::Kind::top:
    case H3Placement::Kind::bottom:
      if (placement.count > total_layers)
        throw ConfigError("make_ch4_config: " + std::to_string(placement.count) + " H3 layers requested of " +
                          std::to_string(total_layers));
      for (std::size_t i = 0; i < placement.count; ++i)
        h3[placement.kind == H3Placement::Kind::top ? total_layers - 1 - i : i] = true;
      break;
    case H3Placement::Kind::mask:
      if (placement.mask.size() != total_layers) throw ConfigError("make_ch4_config: mask length mismatch");
      h3 = placement.mask;
      break;
  }
  BlockSpec proto = base.layers.empty() ? BlockSpec{} : base.layers.front();
  proto.d_mhsa = proto.d_h3 = 0;
  base.layers.clear();
  for (bool is_h3 : h3) {
    BlockSpec s = proto;
    s.mixer = is_h3 ? MixerKind::h3 : MixerKind::mhsa;
    base.layers.push_back(s);
  }
  return base;
}

Linear Linear::random(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  return {uniform({in, out}, bound, rng), uniform({out}, bound, rng)};
}

Var Linear::forward(Context& ctx, Var x) const { return ops::add_row(ops::matmul(x, ctx.param(w)), ctx.param(b)); }

void Linear::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".w", w, true);
  f(prefix + ".b", b, true);
}

LayerNorm LayerNorm::identity(std::size_t d) { return {Tensor({d}, 1.0), Tensor({d}, 0.0)}; }

Var LayerNorm::forward(Context& ctx, Var x) const {
  return ops::layer_norm(x, ctx.param(gain), ctx.param(bias), kNormEps);
}

void LayerNorm::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".gain", gain, true);
  f(prefix + ".bias", bias, true);
}

FeedForward FeedForward::random(std::size_t d, std::mt19937_64& rng) {
  FeedForward f;
  f.norm = LayerNorm::identity(d);
  f.up = Linear::random(d, 4 * d, rng);
  f.down = Linear::random(4 * d, d, rng);
  return f;
}

void FeedForward::visit(const std::string& prefix, const ParamVisitor& f) {
  norm.visit(prefix + ".norm", f);
  up.visit(prefix + ".up", f);
  down.visit(prefix + ".down", f);
}

ConvModule ConvModule::random(std::size_t d, std::size_t kernel, bool causal, std::mt19937_64& rng) {
  ConvModule m;
  m.norm = LayerNorm::identity(d);
  m.pointwise_in = Linear::random(d, 2 * d, rng);
  const double bound = 1.0 / std::sqrt(static_cast<double>(kernel));
  m.depthwise_w = uniform({d, kernel}, bound, rng);
  m.depthwise_b = uniform({d}, bound, rng);
  m.bn_gain = Tensor({d}, 1.0);
  m.bn_bias = Tensor({d}, 0.0);
  m.running_mean = Tensor({d}, 0.0);
  m.running_var = Tensor({d}, 1.0);
  m.frame_norm = LayerNorm::identity(d);
  m.pointwise_out = Linear::random(d, d, rng);
  m.causal = causal;
  return m;
}

void ConvModule::visit(const std::string& prefix, const ParamVisitor& f) {
  norm.visit(prefix + ".norm", f);
  pointwise_in.visit(prefix + ".pointwise_in", f);
  f(prefix + ".depthwise.w", depthwise_w, true);
  f(prefix + ".depthwise.b", depthwise_b, true);
  if (causal) {
    frame_norm.visit(prefix + ".frame_norm", f);
  } else {
    f(prefix + ".bn.gain", bn_gain, true);
    f(prefix + ".bn.bias", bn_bias, true);
    f(prefix + ".bn.running_mean", running_mean, false);
    f(prefix + ".bn.running_var", running_var, false);
  }
  pointwise_out.visit(prefix + ".pointwise_out", f);
}

ConformerBlock ConformerBlock::random(const BlockSpec& spec, const EncoderConfig& cfg, std::mt19937_64& rng) {
  ConformerBlock b;
  b.spec = spec;
  b.dropout = cfg.dropout;
  b.ffn = FeedForward::random(cfg.d, rng);
  b.mixer_norm = LayerNorm::identity(cfg.d);
  auto make_h3 = [&](std::size_t width) {
    return H3Layer::random({width, cfg.h3_heads, cfg.shift_state, cfg.diag_state, cfg.diag_sharing}, rng);
  };
  switch (spec.mixer) {
    case MixerKind::mhsa: b.mhsa = MhsaLayer::random(cfg.d, cfg.mhsa_heads, rng); break;
    case MixerKind::h3: b.h3 = make_h3(cfg.d); break;
    case MixerKind::parallel:
      if (spec.d_mhsa) b.mhsa = MhsaLayer::random(spec.d_mhsa, cfg.mhsa_heads, rng);
      if (spec.d_h3) b.h3 = make_h3(spec.d_h3);
      break;
  }
  b.conv = ConvModule::random(cfg.d, spec.conv_kernel, spec.causal, rng);
  return b;
}

void ConformerBlock::visit(const std::string& prefix, const ParamVisitor& f) {
  ffn.visit(prefix + ".ffn", f);
  mixer_norm.visit(prefix + ".mixer_norm", f);
  if (mhsa) mhsa->visit(prefix + ".mhsa", f);
  if (h3) h3->visit(prefix + ".h3", f);
  conv.visit(prefix + ".conv", f);
}

Var parallel_mixer_forward(Context& ctx, Var x, std::size_t d_mhsa, const MhsaLayer* mhsa, const H3Layer* h3,
                           AttentionMode mode) {
  const std::size_t d = x.value().cols();
  if (d_mhsa > d) throw ShapeError("parallel mixer: split exceeds the input width");
  const std::size_t d_h3 = d - d_mhsa;
  if ((d_mhsa > 0) != (mhsa != nullptr) || (d_h3 > 0) != (h3 != nullptr))
    throw ConfigError("parallel mixer: layers do not match the channel split");
  if (mhsa && mhsa->d != d_mhsa) throw ShapeError("parallel mixer: MHSA width mismatch");
  if (h3 && h3->config.d != d_h3) throw ShapeError("parallel mixer: H3 width mismatch");
  if (d_h3 == 0) return mhsa->forward(ctx, x, mode);
  if (d_mhsa == 0) return h3->forward(ctx, x);
  Var a = mhsa->forward(ctx, ops::slice_cols(x, 0, d_mhsa), mode);
  Var b = h3->forward(ctx, ops::slice_cols(x, d_mhsa, d));
  return ops::concat_cols(a, b);
}

Var ConformerBlock::mixer_forward(Context& ctx, Var x) const {
  const AttentionMode mode = spec.causal ? AttentionMode::causal : AttentionMode::bidirectional;
  switch (spec.mixer) {
    case MixerKind::mhsa: return mhsa->forward(ctx, x, mode);
    case MixerKind::h3: return h3->forward(ctx, x);
    case MixerKind::parallel:
      return parallel_mixer_forward(ctx, x, spec.d_mhsa, mhsa ? &*mhsa : nullptr, h3 ? &*h3 : nullptr, mode);
  }
  throw ConfigError("unknown mixer");
}

Var ConformerBlock::forward(Context& ctx, Var x) const {
  const std::size_t d = ffn.norm.gain.size();
  if (x.value().rank() != 2 || x.value().cols() != d)
    throw ShapeError("conformer block: expected [L x " + std::to_string(d) + "] input, got " + shape_string(x.shape()));

  Var h = ops::swish(ffn.up.forward(ctx, ffn.norm.forward(ctx, x)));
  x = ops::add(x, branch_dropout(ctx, ffn.down.forward(ctx, h), dropout));

  x = ops::add(x, branch_dropout(ctx, mixer_forward(ctx, mixer_norm.forward(ctx, x)), dropout));

  Var c = ops::glu(conv.pointwise_in.forward(ctx, conv.norm.forward(ctx, x)));
  const std::size_t k = conv.kernel();
  c = ops::depthwise_conv(c, ctx.param(conv.depthwise_w), ctx.param(conv.depthwise_b), conv.causal ? k - 1 : (k - 1) / 2);
  if (conv.causal) {
    c = conv.frame_norm.forward(ctx, c);
  } else if (ctx.training()) {
    const Tensor& cv = c.value();
    for (std::size_t j = 0; j < d; ++j) {
      double mean = 0.0, var = 0.0;
      for (std::size_t t = 0; t < cv.rows(); ++t) mean += cv(t, j);
      mean /= static_cast<double>(cv.rows());
      for (std::size_t t = 0; t < cv.rows(); ++t) var += (cv(t, j) - mean) * (cv(t, j) - mean);
      var /= static_cast<double>(cv.rows());
      conv.running_mean[j] += kRunningMomentum * (mean - conv.running_mean[j]);
      conv.running_var[j] += kRunningMomentum * (var - conv.running_var[j]);
    }
    c = ops::batch_norm(c, ctx.param(conv.bn_gain), ctx.param(conv.bn_bias), kNormEps);
  } else {
    c = ops::batch_norm_fixed(c, conv.running_mean, conv.running_var, ctx.param(conv.bn_gain), ctx.param(conv.bn_bias),
                              kNormEps);
  }
  c = conv.pointwise_out.forward(ctx, ops::swish(c));
  return ops::add(x, branch_dropout(ctx, c, dropout));
}

Frontend Frontend::random(std::size_t feature_dim, std::size_t d, bool causal, std::mt19937_64& rng) {
  return {Linear::random(3 * feature_dim, d, rng), Linear::random(3 * d, d, rng), causal};
}

Var Frontend::forward(Context& ctx, Var features) const {
  const std::size_t pad_l = causal ? 2 : 1, pad_r = causal ? 0 : 1;
  Var h = ops::swish(conv1.forward(ctx, ops::unfold_time(features, 3, 2, pad_l, pad_r)));
  return ops::swish(conv2.forward(ctx, ops::unfold_time(h, 3, 2, pad_l, pad_r)));
}

void Frontend::visit(const std::string& prefix, const ParamVisitor& f) {
  conv1.visit(prefix + ".conv1", f);
  conv2.visit(prefix + ".conv2", f);
}

std::size_t subsampled_length(std::size_t frames) { return (frames + 3) / 4; }

Tensor sinusoidal_positions(std::size_t length, std::size_t d, std::size_t offset) {
  Tensor pe({length, d});
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t c = 0; c < d; ++c) {
      const double freq = std::pow(10000.0, -static_cast<double>(c - c % 2) / static_cast<double>(d));
      const double angle = static_cast<double>(t + offset) * freq;
      pe(t, c) = c % 2 ? std::cos(angle) : std::sin(angle);
    }
  return pe;
}

Encoder Encoder::random(const EncoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  Encoder e;
  e.config = cfg;
  e.frontend = Frontend::random(cfg.feature_dim, cfg.d, cfg.causal(), rng);
  for (const BlockSpec& spec : cfg.layers) e.blocks.push_back(ConformerBlock::random(spec, cfg, rng));
  e.final_norm = LayerNorm::identity(cfg.d);
  e.head = Linear::random(cfg.d, cfg.vocab + 1, rng);
  return e;
}

void Encoder::visit(const ParamVisitor& f) {
  frontend.visit("frontend", f);
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit("blocks." + std::to_string(i), f);
  final_norm.visit("final_norm", f);
  head.visit("head", f);
}

void Encoder::visit(const ConstParamVisitor& f) const {
  const_cast<Encoder*>(this)->visit([&](const std::string& name, Tensor& t, bool trainable) { f(name, t, trainable); });
}

std::size_t Encoder::parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Tensor& t, bool trainable) {
    if (trainable) n += t.size();
  });
  return n;
}

Var Encoder::forward(Context& ctx, Var features) const {
  const Tensor& fv = features.value();
  if (fv.rank() != 2 || fv.cols() != config.feature_dim)
    throw ShapeError("encoder: expected [T x " + std::to_string(config.feature_dim) + "] features, got " +
                     shape_string(fv.shape()));
  if (fv.rows() == 0) throw ShapeError("encoder: empty feature sequence");
  fv.check_finite("encoder features");
  Var x = frontend.forward(ctx, features);
  x = ops::add(x, ctx.input(sinusoidal_positions(x.value().rows(), config.d)));
  x = branch_dropout(ctx, x, config.dropout);
  for (const ConformerBlock& block : blocks) x = block.forward(ctx, x);
  return head.forward(ctx, final_norm.forward(ctx, x));
}

Tensor encoder_forward(const Encoder& encoder, const Tensor& features) {
  Tape tape(false);
  Context ctx(tape);
  return encoder.forward(ctx, ctx.input(features)).value();
}

std::vector<FfnGroupStats> ffn_weight_group_stats(const Encoder& encoder) {
  const auto& layers = encoder.config.layers;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].mixer != MixerKind::parallel)
      throw ConfigError("ffn_weight_group_stats: layer " + std::to_string(i + 1) + " is not a parallel mixer");
  std::vector<FfnGroupStats> out;
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
    const Tensor& w = encoder.blocks[i + 1].ffn.up.w;
    const std::size_t split = layers[i].d_mhsa;
    double sums[2] = {0.0, 0.0};
    std::size_t counts[2] = {0, 0};
    for (std::size_t r = 0; r < w.rows(); ++r)
      for (std::size_t c = 0; c < w.cols(); ++c) {
        const int g = r < split ? 0 : 1;
        sums[g] += std::abs(w(r, c));
        ++counts[g];
      }
    auto mean = [](double s, std::size_t n) { return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN(); };
    out.push_back({i + 1, mean(sums[0], counts[0]), mean(sums[1], counts[1])});
  }
  return out;
}

}  // namespace ch4
