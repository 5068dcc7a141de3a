#include "ch4/attention/attention.hpp"

#include <algorithm>
#include <cmath>

#include "ch4/error.hpp"
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

MhsaLayer MhsaLayer::random(std::size_t d, std::size_t heads, std::mt19937_64& rng) {
  MhsaLayer layer;
  layer.d = d;
  layer.heads = heads;
  layer.validate();
  layer.wq = uniform_matrix(d, d, rng);
  layer.wk = uniform_matrix(d, d, rng);
  layer.wv = uniform_matrix(d, d, rng);
  layer.wo = uniform_matrix(d, d, rng);
  return layer;
}

void MhsaLayer::validate() const {
  if (d == 0 || heads == 0 || d % heads)
    throw ConfigError("MHSA: dimension " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads");
}

void MhsaLayer::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".wq", wq, true);
  f(prefix + ".wk", wk, true);
  f(prefix + ".wv", wv, true);
  f(prefix + ".wo", wo, true);
}

Var MhsaLayer::forward(Context& ctx, Var x, AttentionMode mode) const {
  if (x.value().rank() != 2 || x.value().cols() != d)
    throw ShapeError("MHSA: expected [L x " + std::to_string(d) + "] input, got " + shape_string(x.shape()));
  Var q = ops::matmul(x, ctx.param(wq));
  Var k = ops::matmul(x, ctx.param(wk));
  Var v = ops::matmul(x, ctx.param(wv));
  return ops::matmul(ops::softmax_attention(q, k, v, heads, mode), ctx.param(wo));
}

Tensor mhsa_forward(const MhsaLayer& layer, const Tensor& x, AttentionMode mode) {
  Tape tape(false);
  Context ctx(tape);
  return layer.forward(ctx, ctx.input(x), mode).value();
}

std::vector<double> mhsa_step(const MhsaLayer& layer, MhsaStreamState& state, std::span<const double> x) {
  const std::size_t d = layer.d, dh = layer.head_dim();
  if (x.size() != d) throw ShapeError("mhsa_step: input size mismatch");
  std::vector<double> q(d), k(d), v(d), o(d, 0.0), out(d);
  vec_mat(x, layer.wq, q);
  vec_mat(x, layer.wk, k);
  vec_mat(x, layer.wv, v);
  state.keys.insert(state.keys.end(), k.begin(), k.end());
  state.values.insert(state.values.end(), v.begin(), v.end());
  const std::size_t n = ++state.length;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> score(n);
  for (std::size_t h = 0; h < layer.heads; ++h) {
    const std::size_t off = h * dh;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      const double* kj = state.keys.data() + j * d + off;
      double s = 0.0;
      for (std::size_t c = 0; c < dh; ++c) s += q[off + c] * kj[c];
      score[j] = s * scale;
      mx = std::max(mx, score[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (score[j] = std::exp(score[j] - mx));
    for (std::size_t j = 0; j < n; ++j) {
      const double w = score[j] / z;
      const double* vj = state.values.data() + j * d + off;
      for (std::size_t c = 0; c < dh; ++c) o[off + c] += w * vj[c];
    }
  }
  vec_mat(o, layer.wo, out);
  return out;
}

FeatureMap FeatureMap::positive() {
  return {[](double x) { return 1.0 + std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }};
}

Tensor linear_attention_forward(const Tensor& q, const Tensor& k, const Tensor& v, const FeatureMap& phi) {
  if (q.rank() != 2 || k.shape() != q.shape() || v.rank() != 2 || v.rows() != q.rows())
    throw ShapeError("linear_attention_forward: Q and K must be [L x dk] and V [L x dv]");
  Tensor pq = q, pk = k;
  for (double& x : pq.data()) x = phi.apply(x);
  for (double& x : pk.data()) x = phi.apply(x);
  Tape tape(false);
  return ops::linear_attention(tape.constant(std::move(pq)), tape.constant(std::move(pk)), tape.constant(v)).value();
}

namespace ops {

Var softmax_attention(Var q, Var k, Var v, std::size_t heads, AttentionMode mode) {
  const Tensor& qv = q.value();
  if (qv.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape())
    throw ShapeError("softmax_attention: q, k, v must share an [L x d] shape");
  const std::size_t L = qv.rows(), d = qv.cols();
  if (heads == 0 || d % heads) throw ConfigError("softmax_attention: dimension not divisible by heads");
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool causal = mode == AttentionMode::causal;
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();

  if (q.tape != k.tape || q.tape != v.tape) throw Error("softmax_attention: operands on different tapes");
  Tape& tape = *q.tape;
  const bool keep = tape.grad_enabled() && (tape.requires_grad(q) || tape.requires_grad(k) || tape.requires_grad(v));
  // Attention weights per head, [heads x L x L], kept only for the backward
  // pass; masked entries stay zero.
  std::vector<double> probs(keep ? heads * L * L : L, 0.0);
  Tensor out({L, d});
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < L; ++i) {
      double* p = keep ? probs.data() + (h * L + i) * L : probs.data();
      const std::size_t last = causal ? i + 1 : L;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < last; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qv(i, off + c) * kv(j, off + c);
        p[j] = s * scale;
        mx = std::max(mx, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < last; ++j) z += (p[j] = std::exp(p[j] - mx));
      for (std::size_t j = 0; j < last; ++j) {
        p[j] /= z;
        for (std::size_t c = 0; c < dh; ++c) out(i, off + c) += p[j] * vv(j, off + c);
      }
    }
  }
  return tape.record(
      "softmax_attention", std::move(out), {q, k, v},
      [q, k, v, L, heads, dh, scale, causal, probs = std::move(probs)](const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& qv = q.value();
        const Tensor& kv = k.value();
        const Tensor& vv = v.value();
        std::vector<double> gp(L);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < L; ++i) {
            const double* p = probs.data() + (h * L + i) * L;
            const std::size_t last = causal ? i + 1 : L;
            double dot = 0.0;
            for (std::size_t j = 0; j < last; ++j) {
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) s += g(i, off + c) * vv(j, off + c);
              gp[j] = s;
              dot += s * p[j];
              if (gin[2])
                for (std::size_t c = 0; c < dh; ++c) (*gin[2])(j, off + c) += p[j] * g(i, off + c);
            }
            for (std::size_t j = 0; j < last; ++j) {
              const double gs = p[j] * (gp[j] - dot) * scale;
              if (gs == 0.0) continue;
              for (std::size_t c = 0; c < dh; ++c) {
                if (gin[0]) (*gin[0])(i, off + c) += gs * kv(j, off + c);
                if (gin[1]) (*gin[1])(j, off + c) += gs * qv(i, off + c);
              }
            }
          }
        }
      });
}

Var linear_attention(Var phi_q, Var phi_k, Var v) {
  const Tensor& pq = phi_q.value();
  const Tensor& pk = phi_k.value();
  const Tensor& vv = v.value();
  if (pq.rank() != 2 || pk.shape() != pq.shape() || vv.rank() != 2 || vv.rows() != pq.rows())
    throw ShapeError("linear_attention: shape mismatch");
  const std::size_t L = pq.rows(), dk = pq.cols(), dv = vv.cols();
  Tensor out({L, dv});
  std::vector<double> S(dk * dv, 0.0), z(dk, 0.0), den(L);
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t a = 0; a < dk; ++a) {
      z[a] += pk(i, a);
      for (std::size_t b = 0; b < dv; ++b) S[a * dv + b] += pk(i, a) * vv(i, b);
    }
    double dn = 0.0;
    for (std::size_t a = 0; a < dk; ++a) dn += pq(i, a) * z[a];
    if (std::abs(dn) < 1e-12) throw NumericError("linear_attention: vanishing denominator at row " + std::to_string(i));
    den[i] = dn;
    for (std::size_t b = 0; b < dv; ++b) {
      double num = 0.0;
      for (std::size_t a = 0; a < dk; ++a) num += pq(i, a) * S[a * dv + b];
      out(i, b) = num / dn;
    }
  }
  Tensor out_copy = out;
  return phi_q.tape->record(
      "linear_attention", std::move(out), {phi_q, phi_k, v},
      [phi_q, phi_k, v, L, dk, dv, den = std::move(den), o = std::move(out_copy)](const Tensor& g,
                                                                                   std::span<Tensor* const> gin) {
        const Tensor& pq = phi_q.value();
        const Tensor& pk = phi_k.value();
        const Tensor& vv = v.value();
        // Forward pass: recompute S_i, z_i and collect their per-step gradients.
        std::vector<double> S(dk * dv, 0.0), z(dk, 0.0);
        std::vector<double> gS(L * dk * dv), gz(L * dk);
        std::vector<double> gnum(dv);
        for (std::size_t i = 0; i < L; ++i) {
          for (std::size_t a = 0; a < dk; ++a) {
            z[a] += pk(i, a);
            for (std::size_t b = 0; b < dv; ++b) S[a * dv + b] += pk(i, a) * vv(i, b);
          }
          double gden = 0.0;
          for (std::size_t b = 0; b < dv; ++b) {
            gnum[b] = g(i, b) / den[i];
            gden -= g(i, b) * o(i, b) / den[i];
          }
          for (std::size_t a = 0; a < dk; ++a) {
            if (gin[0]) {
              double s = z[a] * gden;
              for (std::size_t b = 0; b < dv; ++b) s += S[a * dv + b] * gnum[b];
              (*gin[0])(i, a) += s;
            }
            gz[i * dk + a] = pq(i, a) * gden;
            for (std::size_t b = 0; b < dv; ++b) gS[(i * dk + a) * dv + b] = pq(i, a) * gnum[b];
          }
        }
        // Reverse cumulative sums route S and z gradients back to each step.
        std::vector<double> accS(dk * dv, 0.0), accz(dk, 0.0);
        for (std::size_t j = L; j-- > 0;) {
          for (std::size_t a = 0; a < dk; ++a) {
            accz[a] += gz[j * dk + a];
            for (std::size_t b = 0; b < dv; ++b) accS[a * dv + b] += gS[(j * dk + a) * dv + b];
          }
          for (std::size_t a = 0; a < dk; ++a) {
            if (gin[1]) {
              double s = accz[a];
              for (std::size_t b = 0; b < dv; ++b) s += accS[a * dv + b] * vv(j, b);
              (*gin[1])(j, a) += s;
            }
            if (gin[2])
              for (std::size_t b = 0; b < dv; ++b) (*gin[2])(j, b) += accS[a * dv + b] * pk(j, a);
          }
        }
      });
}

}  // namespace ops
}  // namespace ch4
