#include "ch4/h3/h3.hpp"

#include <cmath>

#include "ch4/error.hpp"
#include "ch4/numerics/fft.hpp"
#include "ch4/numerics/ops.hpp"

namespace ch4 {

namespace {

Tensor uniform_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t({rows, cols});
  for (double& v : t.data()) v = dist(rng);
  return t;
}

void vec_mat(std::span<const double> x, const Tensor& w, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  const std::size_t n = w.cols();
  const double* wp = w.data().data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = x[i];
    const double* row = wp + i * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += s * row[j];
  }
}

}  // namespace

void H3Config::validate() const {
  if (d == 0 || heads == 0 || d % heads)
    throw ConfigError("H3: dimension " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads");
  if (shift_state == 0 || diag_state == 0) throw ConfigError("H3: state sizes must be positive");
}

H3Layer H3Layer::random(const H3Config& config, std::mt19937_64& rng) {
  config.validate();
  H3Layer layer;
  layer.config = config;
  layer.wq = uniform_matrix(config.d, config.d, rng);
  layer.wk = uniform_matrix(config.d, config.d, rng);
  layer.wv = uniform_matrix(config.d, config.d, rng);
  layer.wo = uniform_matrix(config.d, config.d, rng);
  layer.shift = ShiftBank::random(config.d, config.shift_state, rng);
  layer.diag = DiagBank::random(config.diag_groups(), config.diag_state, rng);
  return layer;
}

void H3Layer::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".wq", wq, true);
  f(prefix + ".wk", wk, true);
  f(prefix + ".wv", wv, true);
  f(prefix + ".wo", wo, true);
  shift.visit(prefix + ".shift", f);
  diag.visit(prefix + ".diag", f);
}

Var H3Layer::forward(Context& ctx, Var x) const {
  const std::size_t d = config.d;
  if (x.value().rank() != 2 || x.value().cols() != d)
    throw ShapeError("H3: expected [L x " + std::to_string(d) + "] input, got " + shape_string(x.shape()));
  const std::size_t L = x.value().rows();
  Var q = ops::matmul(x, ctx.param(wq));
  Var k = ops::matmul(x, ctx.param(wk));
  Var v = ops::matmul(x, ctx.param(wv));
  Var shifted = ops::grouped_causal_conv(k, ctx.param(shift.c), ctx.param(shift.d), 1);
  Var interactions = ops::head_outer(shifted, v, config.heads);
  Var kernel = diag_bank_kernel(ctx, diag, L);
  Var memory = ops::grouped_causal_conv(interactions, kernel, ctx.param(diag.d), config.diag_group_size());
  return ops::matmul(ops::head_contract(q, memory, config.heads), ctx.param(wo));
}

Tensor h3_forward(const H3Layer& layer, const Tensor& x) {
  Tape tape(false);
  Context ctx(tape);
  return layer.forward(ctx, ctx.input(x)).value();
}

H3StreamState make_stream_state(const H3Layer& layer) {
  const H3Config& c = layer.config;
  H3StreamState s;
  s.shift.assign(c.d * c.shift_state, 0.0);
  s.diag.assign(c.interaction_channels() * c.diag_state, 0.0);
  s.poles = layer.diag.poles();
  return s;
}

std::vector<double> h3_step(const H3Layer& layer, H3StreamState& state, std::span<const double> x) {
  const H3Config& cfg = layer.config;
  const std::size_t d = cfg.d, dh = cfg.head_dim(), Ns = cfg.shift_state, Nd = cfg.diag_state;
  if (x.size() != d) throw ShapeError("h3_step: input size mismatch");
  if (state.shift.size() != d * Ns || state.diag.size() != cfg.interaction_channels() * Nd ||
      state.poles.size() != cfg.diag_groups() * Nd)
    throw ShapeError("h3_step: stream state does not match the layer");

  std::vector<double> q(d), k(d), v(d), o(d, 0.0), out(d);
  vec_mat(x, layer.wq, q);
  vec_mat(x, layer.wk, k);
  vec_mat(x, layer.wv, v);

  // Shift SSM: the window holds the last Ns keys per channel.
  for (std::size_t c = 0; c < d; ++c) {
    double* w = state.shift.data() + c * Ns;
    for (std::size_t n = Ns; n-- > 1;) w[n] = w[n - 1];
    w[0] = k[c];
    double y = layer.shift.d[c] * k[c];
    for (std::size_t n = 0; n < Ns; ++n) y += layer.shift.c(c, n) * w[n];
    k[c] = y;
  }

  const DiagBank& bank = layer.diag;
  const std::size_t group_size = cfg.diag_group_size();
  for (std::size_t h = 0; h < cfg.heads; ++h)
    for (std::size_t i = 0; i < dh; ++i) {
      const double ki = k[h * dh + i];
      const double qi = q[h * dh + i];
      for (std::size_t j = 0; j < dh; ++j) {
        const std::size_t ch = (h * dh + i) * dh + j;
        const std::size_t g = ch / group_size;
        const double m = ki * v[h * dh + j];
        Complex* xs = state.diag.data() + ch * Nd;
        const Complex* a = state.poles.data() + g * Nd;
        double s = bank.d[g] * m;
        for (std::size_t n = 0; n < Nd; ++n) {
          const std::size_t p = g * Nd + n;
          xs[n] = a[n] * xs[n] + Complex(bank.b_re[p], bank.b_im[p]) * m;
          s += bank.c_re[p] * xs[n].real() - bank.c_im[p] * xs[n].imag();
        }
        o[h * dh + j] += qi * s;
      }
    }
  vec_mat(o, layer.wo, out);
  return out;
}

double fft_flops(std::size_t n) {
  const std::size_t p = std::max<std::size_t>(2, n);
  return 5.0 * static_cast<double>(p) * std::log2(static_cast<double>(p));
}

H3FlopEstimate h3_flop_estimate(const H3Config& config, std::size_t length) {
  config.validate();
  const double L = static_cast<double>(length);
  const double d = static_cast<double>(config.d);
  const double dh = static_cast<double>(config.head_dim());
  const double H = static_cast<double>(config.heads);
  const double C = static_cast<double>(config.interaction_channels());
  const double G = static_cast<double>(config.diag_groups());
  const double Ns = static_cast<double>(config.shift_state);
  const double Nd = static_cast<double>(config.diag_state);
  const std::size_t P = next_pow2(2 * std::max<std::size_t>(1, length));
  const double Pd = static_cast<double>(P);

  H3FlopEstimate e;
  e.projections = 4.0 * 2.0 * L * d * d;
  e.shift_ssm = 2.0 * L * d * (Ns + 1.0);
  e.outer_product = L * H * dh * dh;
  // Complex multiply-add per state per tap, then one transform per group.
  e.diag_kernel = G * (8.0 * Nd * L + fft_flops(P));
  // Forward and inverse transform plus a spectral product per channel.
  e.diag_conv = C * (2.0 * fft_flops(P) + 6.0 * Pd + 2.0 * L);
  e.contraction = 2.0 * L * H * dh * dh;
  return e;
}

namespace ops {

Var head_outer(Var k, Var v, std::size_t heads) {
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (kv.rank() != 2 || vv.shape() != kv.shape()) throw ShapeError("head_outer: keys and values must match");
  const std::size_t L = kv.rows(), d = kv.cols();
  if (heads == 0 || d % heads) throw ConfigError("head_outer: dimension not divisible by heads");
  const std::size_t dh = d / heads;
  Tensor out({L, heads * dh * dh});
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < dh; ++i)
        for (std::size_t j = 0; j < dh; ++j) out(t, (h * dh + i) * dh + j) = kv(t, h * dh + i) * vv(t, h * dh + j);
  if (k.tape != v.tape) throw Error("head_outer: operands on different tapes");
  return k.tape->record("head_outer", std::move(out), {k, v}, [k, v, L, heads, dh](const Tensor& g, std::span<Tensor* const> gin) {
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < dh; ++i)
          for (std::size_t j = 0; j < dh; ++j) {
            const double gt = g(t, (h * dh + i) * dh + j);
            if (gin[0]) (*gin[0])(t, h * dh + i) += gt * vv(t, h * dh + j);
            if (gin[1]) (*gin[1])(t, h * dh + j) += gt * kv(t, h * dh + i);
          }
  });
}

Var head_contract(Var q, Var s, std::size_t heads) {
  const Tensor& qv = q.value();
  const Tensor& sv = s.value();
  if (qv.rank() != 2 || heads == 0 || qv.cols() % heads) throw ShapeError("head_contract: bad query shape");
  const std::size_t L = qv.rows(), d = qv.cols(), dh = d / heads;
  if (sv.rank() != 2 || sv.rows() != L || sv.cols() != heads * dh * dh)
    throw ShapeError("head_contract: interaction shape " + shape_string(sv.shape()) + " does not match queries");
  Tensor out({L, d});
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < dh; ++i) {
        const double qi = qv(t, h * dh + i);
        for (std::size_t j = 0; j < dh; ++j) out(t, h * dh + j) += qi * sv(t, (h * dh + i) * dh + j);
      }
  if (q.tape != s.tape) throw Error("head_contract: operands on different tapes");
  return q.tape->record("head_contract", std::move(out), {q, s}, [q, s, L, heads, dh](const Tensor& g, std::span<Tensor* const> gin) {
    const Tensor& qv = q.value();
    const Tensor& sv = s.value();
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < dh; ++i)
          for (std::size_t j = 0; j < dh; ++j) {
            const std::size_t ch = (h * dh + i) * dh + j;
            const double gt = g(t, h * dh + j);
            if (gin[0]) (*gin[0])(t, h * dh + i) += gt * sv(t, ch);
            if (gin[1]) (*gin[1])(t, ch) += gt * qv(t, h * dh + i);
          }
  });
}

}  // namespace ops
}  // namespace ch4
