#include "ch4/ssm/ssm_bank.hpp"

#include <cmath>
#include <numbers>

#include "ch4/error.hpp"
#include "ch4/numerics/fft.hpp"

namespace ch4 {

DiagBank DiagBank::random(std::size_t groups, std::size_t state_size, std::mt19937_64& rng) {
  DiagBank bank;
  bank.log_rate = Tensor({groups, state_size});
  bank.phase = Tensor({groups, state_size});
  bank.b_re = Tensor({groups, state_size});
  bank.b_im = Tensor({groups, state_size});
  bank.c_re = Tensor({groups, state_size});
  bank.c_im = Tensor({groups, state_size});
  bank.d = Tensor({groups});
  for (std::size_t g = 0; g < groups; ++g) bank.set_channel(g, DiagSSM::random(state_size, rng));
  return bank;
}

ComplexVector DiagBank::poles() const {
  if (pole_override) return *pole_override;
  ComplexVector a(log_rate.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::exp(Complex(-std::exp(log_rate[i]), phase[i]));
  return a;
}

DiagSSM DiagBank::channel(std::size_t g) const {
  const std::size_t N = state_size();
  DiagSSM s;
  for (std::size_t n = 0; n < N; ++n) {
    s.log_rate.push_back(log_rate(g, n));
    s.phase.push_back(phase(g, n));
    s.b.emplace_back(b_re(g, n), b_im(g, n));
    s.c.emplace_back(c_re(g, n), c_im(g, n));
  }
  s.d = d[g];
  if (pole_override) s.pole_override = ComplexVector(pole_override->begin() + g * N, pole_override->begin() + (g + 1) * N);
  return s;
}

void DiagBank::set_channel(std::size_t g, const DiagSSM& s) {
  s.validate();
  const std::size_t N = state_size();
  if (s.state_size() != N) throw ShapeError("DiagBank: state size mismatch");
  for (std::size_t n = 0; n < N; ++n) {
    log_rate(g, n) = s.log_rate[n];
    phase(g, n) = s.phase[n];
    b_re(g, n) = s.b[n].real();
    b_im(g, n) = s.b[n].imag();
    c_re(g, n) = s.c[n].real();
    c_im(g, n) = s.c[n].imag();
  }
  d[g] = s.d;
  if (s.pole_override) {
    if (!pole_override) pole_override = poles();
    std::copy(s.pole_override->begin(), s.pole_override->end(), pole_override->begin() + g * N);
  }
}

void DiagBank::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".log_rate", log_rate, true);
  f(prefix + ".phase", phase, true);
  f(prefix + ".b_re", b_re, true);
  f(prefix + ".b_im", b_im, true);
  f(prefix + ".c_re", c_re, true);
  f(prefix + ".c_im", c_im, true);
  f(prefix + ".d", d, true);
}

ShiftBank ShiftBank::random(std::size_t channels, std::size_t state_size, std::mt19937_64& rng) {
  ShiftBank bank;
  bank.c = Tensor({channels, state_size});
  bank.d = Tensor({channels});
  for (std::size_t i = 0; i < channels; ++i) bank.set_channel(i, ShiftSSM::random(state_size, rng));
  return bank;
}

ShiftSSM ShiftBank::channel(std::size_t i) const {
  ShiftSSM s;
  auto row = c.row(i);
  s.c.assign(row.begin(), row.end());
  s.d = d[i];
  return s;
}

void ShiftBank::set_channel(std::size_t i, const ShiftSSM& s) {
  if (s.state_size() != state_size()) throw ShapeError("ShiftBank: state size mismatch");
  std::copy(s.c.begin(), s.c.end(), c.row(i).begin());
  d[i] = s.d;
}

void ShiftBank::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".c", c, true);
  f(prefix + ".d", d, true);
}

namespace ops {
namespace {

struct KernelGrads {
  ComplexVector sum_pow;   // sum_j g_j a^j
  ComplexVector sum_jpow;  // sum_j j g_j a^j
};

Tensor kernel_values(const ComplexVector& a, const Tensor& b_re, const Tensor& b_im, const Tensor& c_re,
                     const Tensor& c_im, std::size_t length) {
  const std::size_t G = b_re.rows(), N = b_re.cols();
  Tensor k({G, length});
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t i = g * N + n;
      Complex w = Complex(c_re[i], c_im[i]) * Complex(b_re[i], b_im[i]);
      for (std::size_t j = 0; j < length; ++j) {
        k(g, j) += w.real();
        w *= a[i];
      }
    }
  return k;
}

// Per-state sums of the kernel gradient against powers of the poles.
KernelGrads kernel_sums(const ComplexVector& a, const Tensor& gk, std::size_t N) {
  const std::size_t G = gk.rows(), L = gk.cols();
  KernelGrads out{ComplexVector(G * N), ComplexVector(G * N)};
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t i = g * N + n;
      Complex p = 1.0, s = 0.0, sj = 0.0;
      for (std::size_t j = 0; j < L; ++j) {
        s += gk(g, j) * p;
        sj += static_cast<double>(j) * gk(g, j) * p;
        p *= a[i];
      }
      out.sum_pow[i] = s;
      out.sum_jpow[i] = sj;
    }
  return out;
}

void check_bank_shapes(const char* op, std::initializer_list<Var> vars) {
  const Shape& s = vars.begin()->shape();
  if (s.size() != 2) throw ShapeError(std::string(op) + ": parameters must be [groups x states]");
  for (const Var& v : vars)
    if (v.shape() != s) throw ShapeError(std::string(op) + ": inconsistent parameter shapes");
}

void accumulate_bc_grads(const KernelGrads& sums, const Tensor& b_re, const Tensor& b_im, const Tensor& c_re,
                         const Tensor& c_im, std::span<Tensor* const> gin, std::size_t offset) {
  // d k_j = Re(dw a^j) with w = c b, so dL/d(re) = Re(S x), dL/d(im) = -Im(S x)
  // where S = sum_j g_j a^j and x is the other factor of w.
  for (std::size_t i = 0; i < sums.sum_pow.size(); ++i) {
    const Complex b(b_re[i], b_im[i]);
    const Complex c(c_re[i], c_im[i]);
    const Complex sb = sums.sum_pow[i] * c;
    const Complex sc = sums.sum_pow[i] * b;
    if (gin[offset + 0]) (*gin[offset + 0])[i] += sb.real();
    if (gin[offset + 1]) (*gin[offset + 1])[i] -= sb.imag();
    if (gin[offset + 2]) (*gin[offset + 2])[i] += sc.real();
    if (gin[offset + 3]) (*gin[offset + 3])[i] -= sc.imag();
  }
}

}  // namespace

Var diag_kernel(Var log_rate, Var phase, Var b_re, Var b_im, Var c_re, Var c_im, std::size_t length) {
  check_bank_shapes("diag_kernel", {log_rate, phase, b_re, b_im, c_re, c_im});
  if (length == 0) throw ShapeError("diag_kernel: length must be positive");
  const Tensor& lr = log_rate.value();
  const Tensor& ph = phase.value();
  ComplexVector a(lr.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::exp(Complex(-std::exp(lr[i]), ph[i]));
  Tensor k = kernel_values(a, b_re.value(), b_im.value(), c_re.value(), c_im.value(), length);
  const std::size_t N = lr.cols();
  return log_rate.tape->record(
      "diag_kernel", std::move(k), {log_rate, phase, b_re, b_im, c_re, c_im},
      [a, N, log_rate, b_re, b_im, c_re, c_im](const Tensor& g, std::span<Tensor* const> gin) {
        const KernelGrads sums = kernel_sums(a, g, N);
        const Tensor& lr = log_rate.value();
        accumulate_bc_grads(sums, b_re.value(), b_im.value(), c_re.value(), c_im.value(), gin, 2);
        if (!gin[0] && !gin[1]) return;
        for (std::size_t i = 0; i < a.size(); ++i) {
          // d k_j = Re(w j a^{j-1} da), da = a (-exp(rho) d rho + i d theta).
          const Complex w = Complex(c_re.value()[i], c_im.value()[i]) * Complex(b_re.value()[i], b_im.value()[i]);
          const Complex z = w * sums.sum_jpow[i];
          if (gin[0]) (*gin[0])[i] -= std::exp(lr[i]) * z.real();
          if (gin[1]) (*gin[1])[i] -= z.imag();
        }
      });
}

Var diag_kernel_fixed_poles(const ComplexVector& poles, Var b_re, Var b_im, Var c_re, Var c_im, std::size_t length) {
  check_bank_shapes("diag_kernel_fixed_poles", {b_re, b_im, c_re, c_im});
  if (poles.size() != b_re.value().size()) throw ShapeError("diag_kernel_fixed_poles: pole count mismatch");
  if (length == 0) throw ShapeError("diag_kernel_fixed_poles: length must be positive");
  Tensor k = kernel_values(poles, b_re.value(), b_im.value(), c_re.value(), c_im.value(), length);
  const std::size_t N = b_re.value().cols();
  return b_re.tape->record("diag_kernel", std::move(k), {b_re, b_im, c_re, c_im},
                           [poles, N, b_re, b_im, c_re, c_im](const Tensor& g, std::span<Tensor* const> gin) {
                             const KernelGrads sums = kernel_sums(poles, g, N);
                             accumulate_bc_grads(sums, b_re.value(), b_im.value(), c_re.value(), c_im.value(), gin, 0);
                           });
}

namespace {

constexpr std::size_t kDirectKernelLimit = 32;

// Spectra of two real sequences from one complex transform.
void real_pair_spectra(std::span<const double> x, std::span<const double> y, std::size_t P, ComplexVector& X,
                       ComplexVector& Y) {
  ComplexVector z(P);
  for (std::size_t t = 0; t < x.size(); ++t) z[t].real(x[t]);
  for (std::size_t t = 0; t < y.size(); ++t) z[t].imag(y[t]);
  fft_inplace(z, false);
  X.resize(P);
  Y.resize(P);
  for (std::size_t f = 0; f < P; ++f) {
    const Complex zc = std::conj(z[(P - f) % P]);
    X[f] = 0.5 * (z[f] + zc);
    Y[f] = Complex(0.0, -0.5) * (z[f] - zc);
  }
}

// Inverse transform of two Hermitian spectra at once: returns x + i y.
ComplexVector real_pair_inverse(const ComplexVector& X, const ComplexVector* Y) {
  ComplexVector z(X.size());
  for (std::size_t f = 0; f < z.size(); ++f) z[f] = Y ? X[f] + Complex(0.0, 1.0) * (*Y)[f] : X[f];
  fft_inplace(z, true);
  return z;
}

std::vector<double> column(const Tensor& m, std::size_t c, std::size_t length) {
  std::vector<double> out(length);
  for (std::size_t t = 0; t < length; ++t) out[t] = m(t, c);
  return out;
}

std::vector<double> kernel_row(const Tensor& k, std::size_t g, std::size_t length) {
  return std::vector<double>(k.row(g).begin(), k.row(g).begin() + static_cast<long>(length));
}

// Spectra of each kernel row truncated to K taps.
std::vector<ComplexVector> kernel_spectra(const Tensor& k, std::size_t K, std::size_t P) {
  const std::size_t G = k.rows();
  std::vector<ComplexVector> out(G);
  for (std::size_t g = 0; g < G; g += 2) {
    const std::vector<double> a = kernel_row(k, g, K);
    const std::vector<double> b = g + 1 < G ? kernel_row(k, g + 1, K) : std::vector<double>{};
    ComplexVector A, B;
    real_pair_spectra(a, b, P, A, B);
    out[g] = std::move(A);
    if (g + 1 < G) out[g + 1] = std::move(B);
  }
  return out;
}

}  // namespace

Var grouped_causal_conv(Var u, Var kernel, Var feedthrough, std::size_t group_size) {
  const Tensor& uv = u.value();
  const Tensor& kv = kernel.value();
  const Tensor& dv = feedthrough.value();
  if (uv.rank() != 2 || kv.rank() != 2) throw ShapeError("grouped_causal_conv: expected matrices");
  const std::size_t L = uv.rows(), C = uv.cols(), G = kv.rows();
  if (group_size == 0 || C != G * group_size)
    throw ShapeError("grouped_causal_conv: " + std::to_string(C) + " channels do not split into " + std::to_string(G) +
                     " groups of " + std::to_string(group_size));
  if (dv.size() != G) throw ShapeError("grouped_causal_conv: feedthrough size mismatch");
  if (L == 0) throw ShapeError("grouped_causal_conv: empty sequence");
  const std::size_t K = std::min(kv.cols(), L);
  const bool direct = K <= kDirectKernelLimit;
  const std::size_t P = next_pow2(L + K - 1);
  const bool keep_spectra = u.tape->grad_enabled() && (u.tape->requires_grad(kernel));

  Tensor y({L, C});
  std::vector<ComplexVector> u_spectra;
  if (direct) {
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t ch = 0; ch < C; ++ch) {
        const std::size_t g = ch / group_size;
        double s = dv[g] * uv(t, ch);
        const std::size_t taps = std::min(K, t + 1);
        for (std::size_t j = 0; j < taps; ++j) s += kv(g, j) * uv(t - j, ch);
        y(t, ch) = s;
      }
  } else {
    const std::vector<ComplexVector> kf = kernel_spectra(kv, K, P);
    if (keep_spectra) u_spectra.resize(C);
    for (std::size_t ch = 0; ch < C; ch += 2) {
      const bool pair = ch + 1 < C;
      ComplexVector U1, U2;
      real_pair_spectra(column(uv, ch, L), pair ? column(uv, ch + 1, L) : std::vector<double>{}, P, U1, U2);
      ComplexVector Y1(P), Y2(P);
      const ComplexVector& K1 = kf[ch / group_size];
      for (std::size_t f = 0; f < P; ++f) Y1[f] = U1[f] * K1[f];
      if (pair) {
        const ComplexVector& K2 = kf[(ch + 1) / group_size];
        for (std::size_t f = 0; f < P; ++f) Y2[f] = U2[f] * K2[f];
      }
      const ComplexVector z = real_pair_inverse(Y1, pair ? &Y2 : nullptr);
      for (std::size_t t = 0; t < L; ++t) {
        y(t, ch) = z[t].real() + dv[ch / group_size] * uv(t, ch);
        if (pair) y(t, ch + 1) = z[t].imag() + dv[(ch + 1) / group_size] * uv(t, ch + 1);
      }
      if (keep_spectra) {
        u_spectra[ch] = std::move(U1);
        if (pair) u_spectra[ch + 1] = std::move(U2);
      }
    }
  }

  return u.tape->record(
      "grouped_causal_conv", std::move(y), {u, kernel, feedthrough},
      [u, kernel, feedthrough, L, C, G, K, P, direct, group_size, u_spectra = std::move(u_spectra)](
          const Tensor& gy, std::span<Tensor* const> gin) {
        const Tensor& uv = u.value();
        const Tensor& kv = kernel.value();
        const Tensor& dv = feedthrough.value();
        if (gin[2])
          for (std::size_t t = 0; t < L; ++t)
            for (std::size_t ch = 0; ch < C; ++ch) (*gin[2])[ch / group_size] += gy(t, ch) * uv(t, ch);
        if (direct) {
          for (std::size_t t = 0; t < L; ++t)
            for (std::size_t ch = 0; ch < C; ++ch) {
              const std::size_t g = ch / group_size;
              const double gt = gy(t, ch);
              if (gin[0]) (*gin[0])(t, ch) += dv[g] * gt;
              const std::size_t taps = std::min(K, t + 1);
              for (std::size_t j = 0; j < taps; ++j) {
                if (gin[0]) (*gin[0])(t - j, ch) += kv(g, j) * gt;
                if (gin[1]) (*gin[1])(g, j) += uv(t - j, ch) * gt;
              }
            }
          return;
        }
        const std::vector<ComplexVector> kf = gin[0] ? kernel_spectra(kv, K, P) : std::vector<ComplexVector>{};
        std::vector<ComplexVector> gk_spec(gin[1] ? G : 0, ComplexVector(P));
        for (std::size_t ch = 0; ch < C; ch += 2) {
          const bool pair = ch + 1 < C;
          ComplexVector G1, G2;
          real_pair_spectra(column(gy, ch, L), pair ? column(gy, ch + 1, L) : std::vector<double>{}, P, G1, G2);
          if (gin[0]) {
            // Correlation with the kernel: gu_s = sum_{t>=s} gy_t k_{t-s}.
            ComplexVector A(P), B(P);
            const ComplexVector& K1 = kf[ch / group_size];
            for (std::size_t f = 0; f < P; ++f) A[f] = G1[f] * std::conj(K1[f]);
            if (pair) {
              const ComplexVector& K2 = kf[(ch + 1) / group_size];
              for (std::size_t f = 0; f < P; ++f) B[f] = G2[f] * std::conj(K2[f]);
            }
            const ComplexVector z = real_pair_inverse(A, pair ? &B : nullptr);
            for (std::size_t t = 0; t < L; ++t) {
              (*gin[0])(t, ch) += z[t].real() + dv[ch / group_size] * gy(t, ch);
              if (pair) (*gin[0])(t, ch + 1) += z[t].imag() + dv[(ch + 1) / group_size] * gy(t, ch + 1);
            }
          }
          if (gin[1]) {
            ComplexVector& acc1 = gk_spec[ch / group_size];
            const ComplexVector& U1 = u_spectra[ch];
            for (std::size_t f = 0; f < P; ++f) acc1[f] += G1[f] * std::conj(U1[f]);
            if (pair) {
              ComplexVector& acc2 = gk_spec[(ch + 1) / group_size];
              const ComplexVector& U2 = u_spectra[ch + 1];
              for (std::size_t f = 0; f < P; ++f) acc2[f] += G2[f] * std::conj(U2[f]);
            }
          }
        }
        if (gin[1])
          for (std::size_t g = 0; g < G; g += 2) {
            const bool pair = g + 1 < G;
            const ComplexVector z = real_pair_inverse(gk_spec[g], pair ? &gk_spec[g + 1] : nullptr);
            for (std::size_t j = 0; j < K; ++j) {
              (*gin[1])(g, j) += z[j].real();
              if (pair) (*gin[1])(g + 1, j) += z[j].imag();
            }
          }
      });
}

}  // namespace ops

Var diag_bank_kernel(Context& ctx, const DiagBank& bank, std::size_t length) {
  if (bank.pole_override)
    return ops::diag_kernel_fixed_poles(*bank.pole_override, ctx.param(bank.b_re), ctx.param(bank.b_im),
                                        ctx.param(bank.c_re), ctx.param(bank.c_im), length);
  return ops::diag_kernel(ctx.param(bank.log_rate), ctx.param(bank.phase), ctx.param(bank.b_re), ctx.param(bank.b_im),
                          ctx.param(bank.c_re), ctx.param(bank.c_im), length);
}

}  // namespace ch4
