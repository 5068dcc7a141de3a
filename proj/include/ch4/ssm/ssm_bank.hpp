#pragma once

#include <optional>
#include <random>
#include <string>

#include "ch4/numerics/context.hpp"
#include "ch4/ssm/ssm.hpp"

namespace ch4 {

// Parameters of G diagonal SSMs with N states each, stored as [G x N] real
// tensors (complex b and c split into real and imaginary parts) and [G] for D.
struct DiagBank {
  Tensor log_rate, phase, b_re, b_im, c_re, c_im, d;
  // Optional fixed poles, G*N entries row-major (tests only).
  std::optional<ComplexVector> pole_override;

  static DiagBank random(std::size_t groups, std::size_t state_size, std::mt19937_64& rng);
  std::size_t groups() const { return d.size(); }
  std::size_t state_size() const { return log_rate.cols(); }
  ComplexVector poles() const;
  // Channel g as a standalone SSM.
  DiagSSM channel(std::size_t g) const;
  void set_channel(std::size_t g, const DiagSSM& ssm);

  void visit(const std::string& prefix, const ParamVisitor& f);
};

// C shift SSMs, c as [C x N], d as [C].
struct ShiftBank {
  Tensor c, d;

  static ShiftBank random(std::size_t channels, std::size_t state_size, std::mt19937_64& rng);
  std::size_t channels() const { return d.size(); }
  std::size_t state_size() const { return c.cols(); }
  ShiftSSM channel(std::size_t i) const;
  void set_channel(std::size_t i, const ShiftSSM& ssm);

  void visit(const std::string& prefix, const ParamVisitor& f);
};

namespace ops {

// Real kernels [G x length], k[g, j] = Re(sum_n c_gn b_gn a_gn^j), with poles
// a = exp(-exp(log_rate) + i phase). All six inputs are [G x N].
Var diag_kernel(Var log_rate, Var phase, Var b_re, Var b_im, Var c_re, Var c_im, std::size_t length);
// Same with fixed poles; no gradient flows to the poles.
Var diag_kernel_fixed_poles(const ComplexVector& poles, Var b_re, Var b_im, Var c_re, Var c_im, std::size_t length);

// y[t, ch] = sum_{j<=t} kernel[g, j] u[t-j, ch] + feedthrough[g] u[t, ch] with
// g = ch / group_size. u is [L x C], kernel [G x K], feedthrough [G].
// Short kernels are applied directly, long ones through zero-padded FFTs.
Var grouped_causal_conv(Var u, Var kernel, Var feedthrough, std::size_t group_size);

}  // namespace ops

// Kernel of a bank on the tape, honoring the pole override.
Var diag_bank_kernel(Context& ctx, const DiagBank& bank, std::size_t length);

}  // namespace ch4
