#pragma once

#include <optional>
#include <random>
#include <span>
#include <vector>

#include "ch4/numerics/tensor.hpp"

namespace ch4 {

// Single-channel SSM with diagonal transition. Poles are parameterized as
// a_n = exp(-exp(log_rate_n) + i * phase_n), which keeps |a_n| < 1.
struct DiagSSM {
  std::vector<double> log_rate;
  std::vector<double> phase;
  ComplexVector b;
  ComplexVector c;
  double d = 0.0;
  // Explicit poles that bypass the stable parameterization (tests only, e.g.
  // a = 1 for an integrator or a = 0 for a pass-through).
  std::optional<ComplexVector> pole_override;

  // |a_n| uniform in [0.85, 0.999], phase_n = pi n / N, b_n = 1 - |a_n|,
  // c_n complex normal with variance 1/N per component.
  static DiagSSM random(std::size_t state_size, std::mt19937_64& rng);
  static DiagSSM with_poles(ComplexVector poles, ComplexVector b, ComplexVector c, double d);

  std::size_t state_size() const { return b.size(); }
  ComplexVector poles() const;
  void validate() const;
};

// Single-channel SSM whose transition is the shift matrix and whose input
// matrix is e_1, so the state is the window (u_t, ..., u_{t-N+1}).
struct ShiftSSM {
  std::vector<double> c;
  double d = 0.0;

  static ShiftSSM random(std::size_t state_size, std::mt19937_64& rng);
  std::size_t state_size() const { return c.size(); }
  void validate() const;
};

// Impulse response (CB, CAB, ..., CA^{L-1}B) of a single channel.
struct SSMKernel {
  std::vector<double> k;
  std::size_t length() const { return k.size(); }
};

double log_rate_for_magnitude(double magnitude);

// Sequential evaluation of x_t = A x_{t-1} + B u_t, y_t = C x_t + D u_t from x_0 = 0.
std::vector<double> scan_recurrent(const DiagSSM& ssm, std::span<const double> u);
std::vector<double> scan_recurrent(const ShiftSSM& ssm, std::span<const double> u);

SSMKernel materialize_kernel(const DiagSSM& ssm, std::size_t length);
SSMKernel materialize_kernel(const ShiftSSM& ssm, std::size_t length);
// Kernel before the real part is taken.
ComplexVector materialize_kernel_complex(const DiagSSM& ssm, std::size_t length);

// causal_convolve(u, kernel) + D u.
std::vector<double> forward_conv(const DiagSSM& ssm, std::span<const double> u);
std::vector<double> forward_conv(const ShiftSSM& ssm, std::span<const double> u);

// One recurrence step; `state` is updated in place and y_t returned.
double step(const DiagSSM& ssm, std::span<Complex> state, double u);
double step(const ShiftSSM& ssm, std::span<double> state, double u);

}  // namespace ch4
