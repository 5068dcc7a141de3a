#include "ch4/ssm/ssm.hpp"

#include <cmath>
#include <numbers>

#include "ch4/error.hpp"
#include "ch4/numerics/fft.hpp"

namespace ch4 {
namespace {

void check_input(std::span<const double> u) {
  if (u.empty()) throw ShapeError("ssm: empty input sequence");
  for (double v : u)
    if (!std::isfinite(v)) throw NumericError("ssm: non-finite input");
}

void check_output(const std::vector<double>& y) {
  for (double v : y)
    if (!std::isfinite(v)) throw NumericError("ssm: non-finite output");
}

}  // namespace

double log_rate_for_magnitude(double magnitude) { return std::log(-std::log(magnitude)); }

DiagSSM DiagSSM::random(std::size_t state_size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.85, 0.999);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(state_size)));
  DiagSSM s;
  for (std::size_t n = 0; n < state_size; ++n) {
    const double m = mag(rng);
    s.log_rate.push_back(log_rate_for_magnitude(m));
    s.phase.push_back(std::numbers::pi * static_cast<double>(n) / static_cast<double>(state_size));
    s.b.emplace_back(1.0 - m, 0.0);
    const double re = normal(rng);
    const double im = normal(rng);
    s.c.emplace_back(re, im);
  }
  s.d = 1.0;
  return s;
}

DiagSSM DiagSSM::with_poles(ComplexVector poles, ComplexVector b, ComplexVector c, double d) {
  DiagSSM s;
  s.log_rate.assign(poles.size(), 0.0);
  s.phase.assign(poles.size(), 0.0);
  s.b = std::move(b);
  s.c = std::move(c);
  s.d = d;
  s.pole_override = std::move(poles);
  s.validate();
  return s;
}

ComplexVector DiagSSM::poles() const {
  if (pole_override) return *pole_override;
  ComplexVector a(log_rate.size());
  for (std::size_t n = 0; n < a.size(); ++n) a[n] = std::exp(Complex(-std::exp(log_rate[n]), phase[n]));
  return a;
}

void DiagSSM::validate() const {
  const std::size_t n = b.size();
  if (n == 0) throw ConfigError("DiagSSM: state size must be positive");
  if (c.size() != n || log_rate.size() != n || phase.size() != n || (pole_override && pole_override->size() != n))
    throw ShapeError("DiagSSM: inconsistent parameter sizes");
}

ShiftSSM ShiftSSM::random(std::size_t state_size, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(state_size)));
  ShiftSSM s;
  for (std::size_t n = 0; n < state_size; ++n) s.c.push_back(normal(rng));
  s.d = 1.0;
  return s;
}

void ShiftSSM::validate() const {
  if (c.empty()) throw ConfigError("ShiftSSM: state size must be positive");
}

std::vector<double> scan_recurrent(const DiagSSM& ssm, std::span<const double> u) {
  ssm.validate();
  check_input(u);
  const ComplexVector a = ssm.poles();
  ComplexVector x(ssm.state_size());
  std::vector<double> y(u.size());
  for (std::size_t t = 0; t < u.size(); ++t) {
    double out = ssm.d * u[t];
    for (std::size_t n = 0; n < x.size(); ++n) {
      x[n] = a[n] * x[n] + ssm.b[n] * u[t];
      out += (ssm.c[n] * x[n]).real();
    }
    y[t] = out;
  }
  check_output(y);
  return y;
}

std::vector<double> scan_recurrent(const ShiftSSM& ssm, std::span<const double> u) {
  ssm.validate();
  check_input(u);
  // x_t = (u_t, ..., u_{t-N+1}), so C x_t reads the window directly.
  std::vector<double> y(u.size());
  for (std::size_t t = 0; t < u.size(); ++t) {
    double out = ssm.d * u[t];
    for (std::size_t n = 0; n < ssm.c.size() && n <= t; ++n) out += ssm.c[n] * u[t - n];
    y[t] = out;
  }
  check_output(y);
  return y;
}

ComplexVector materialize_kernel_complex(const DiagSSM& ssm, std::size_t length) {
  ssm.validate();
  if (length == 0) throw ShapeError("materialize_kernel: length must be positive");
  const ComplexVector a = ssm.poles();
  ComplexVector k(length);
  // Running weights c_n a_n^j b_n, advanced by one elementwise scaling per step.
  ComplexVector w(a.size());
  for (std::size_t n = 0; n < a.size(); ++n) w[n] = ssm.c[n] * ssm.b[n];
  for (std::size_t j = 0; j < length; ++j) {
    Complex s = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) {
      s += w[n];
      w[n] *= a[n];
    }
    k[j] = s;
  }
  return k;
}

SSMKernel materialize_kernel(const DiagSSM& ssm, std::size_t length) {
  const ComplexVector kc = materialize_kernel_complex(ssm, length);
  SSMKernel out;
  out.k.reserve(length);
  for (const Complex& v : kc) out.k.push_back(v.real());
  check_output(out.k);
  return out;
}

SSMKernel materialize_kernel(const ShiftSSM& ssm, std::size_t length) {
  ssm.validate();
  if (length == 0) throw ShapeError("materialize_kernel: length must be positive");
  SSMKernel out;
  out.k.assign(length, 0.0);
  for (std::size_t j = 0; j < std::min(length, ssm.c.size()); ++j) out.k[j] = ssm.c[j];
  return out;
}

namespace {

template <class SSM>
std::vector<double> conv_path(const SSM& ssm, std::span<const double> u) {
  check_input(u);
  const SSMKernel kernel = materialize_kernel(ssm, u.size());
  std::vector<double> y = causal_convolve(u, kernel.k);
  for (std::size_t t = 0; t < y.size(); ++t) y[t] += ssm.d * u[t];
  check_output(y);
  return y;
}

}  // namespace

std::vector<double> forward_conv(const DiagSSM& ssm, std::span<const double> u) { return conv_path(ssm, u); }
std::vector<double> forward_conv(const ShiftSSM& ssm, std::span<const double> u) { return conv_path(ssm, u); }

double step(const DiagSSM& ssm, std::span<Complex> state, double u) {
  if (state.size() != ssm.state_size())
    throw ShapeError("step: state size " + std::to_string(state.size()) + " != " + std::to_string(ssm.state_size()));
  const ComplexVector a = ssm.poles();
  double y = ssm.d * u;
  for (std::size_t n = 0; n < state.size(); ++n) {
    state[n] = a[n] * state[n] + ssm.b[n] * u;
    y += (ssm.c[n] * state[n]).real();
  }
  return y;
}

double step(const ShiftSSM& ssm, std::span<double> state, double u) {
  if (state.size() != ssm.state_size())
    throw ShapeError("step: state size " + std::to_string(state.size()) + " != " + std::to_string(ssm.state_size()));
  for (std::size_t n = state.size(); n-- > 1;) state[n] = state[n - 1];
  state[0] = u;
  double y = ssm.d * u;
  for (std::size_t n = 0; n < state.size(); ++n) y += ssm.c[n] * state[n];
  return y;
}

}  // namespace ch4
