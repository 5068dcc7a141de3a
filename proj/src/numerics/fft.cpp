#include "ch4/numerics/fft.hpp"

#include <cmath>
#include <map>
#include <numbers>

#include "ch4/error.hpp"

namespace ch4 {
namespace {

struct FftPlan {
  std::vector<std::size_t> bit_reverse;
  ComplexVector twiddles;  // exp(-2 pi i k / n), k < n/2

  explicit FftPlan(std::size_t n) : bit_reverse(n), twiddles(n / 2) {
    std::size_t bits = 0;
    while ((std::size_t{1} << bits) < n) ++bits;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t r = 0;
      for (std::size_t b = 0; b < bits; ++b)
        if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
      bit_reverse[i] = r;
    }
    for (std::size_t k = 0; k < n / 2; ++k) {
      const double angle = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
      twiddles[k] = {std::cos(angle), std::sin(angle)};
    }
  }
};

const FftPlan& plan_for(std::size_t n) {
  thread_local std::map<std::size_t, FftPlan> plans;
  auto it = plans.find(n);
  if (it == plans.end()) it = plans.emplace(n, FftPlan(n)).first;
  return it->second;
}

}  // namespace

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void fft_inplace(std::span<Complex> data, bool inverse) {
  const std::size_t n = data.size();
  if (n == 0) throw ShapeError("fft: empty input");
  if (n & (n - 1)) throw ShapeError("fft_inplace: length must be a power of two");
  const FftPlan& plan = plan_for(n);
  for (std::size_t i = 0; i < n; ++i)
    if (i < plan.bit_reverse[i]) std::swap(data[i], data[plan.bit_reverse[i]]);
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t stride = n / len;
    for (std::size_t start = 0; start < n; start += len) {
      for (std::size_t k = 0; k < half; ++k) {
        Complex w = plan.twiddles[k * stride];
        if (inverse) w = std::conj(w);
        const Complex a = data[start + k];
        const Complex b = data[start + k + half] * w;
        data[start + k] = a + b;
        data[start + k + half] = a - b;
      }
    }
  }
  if (inverse) {
    const double scale = 1.0 / static_cast<double>(n);
    for (Complex& v : data) v *= scale;
  }
}

ComplexVector fft(std::span<const Complex> x) {
  if (x.empty()) throw ShapeError("fft: empty input");
  ComplexVector out(next_pow2(x.size()));
  std::copy(x.begin(), x.end(), out.begin());
  fft_inplace(out, false);
  return out;
}

ComplexVector ifft(std::span<const Complex> x) {
  if (x.empty()) throw ShapeError("ifft: empty input");
  ComplexVector out(next_pow2(x.size()));
  std::copy(x.begin(), x.end(), out.begin());
  fft_inplace(out, true);
  return out;
}

std::vector<double> causal_convolve(std::span<const double> u, std::span<const double> k) {
  if (u.size() != k.size())
    throw ShapeError("causal_convolve: input length " + std::to_string(u.size()) + " != kernel length " +
                     std::to_string(k.size()));
  const std::size_t L = u.size();
  if (L == 0) return {};
  const std::size_t P = next_pow2(2 * L);
  // Pack u and k into one complex transform and separate them by symmetry.
  ComplexVector z(P);
  for (std::size_t t = 0; t < L; ++t) z[t] = {u[t], k[t]};
  fft_inplace(z, false);
  ComplexVector prod(P);
  for (std::size_t f = 0; f < P; ++f) {
    const Complex zc = std::conj(z[(P - f) % P]);
    const Complex uf = 0.5 * (z[f] + zc);
    const Complex kf = Complex(0.0, -0.5) * (z[f] - zc);
    prod[f] = uf * kf;
  }
  fft_inplace(prod, true);
  std::vector<double> y(L);
  for (std::size_t t = 0; t < L; ++t) y[t] = prod[t].real();
  for (double v : y)
    if (!std::isfinite(v)) throw NumericError("causal_convolve: non-finite value produced");
  return y;
}

}  // namespace ch4
