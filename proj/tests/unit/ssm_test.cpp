#include <cmath>

#include "ch4/error.hpp"
#include "ch4/numerics/grad_check.hpp"
#include "ch4/numerics/ops.hpp"
#include "ch4/ssm/ssm_bank.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "unit/test_util.hpp"

using namespace ch4;
using namespace ch4::oracle;
using ch4::testing::random_tensor;
using ch4::testing::weighted;
using ch4::testing::random_vector;

namespace {

DiagSSM scalar_ssm(Complex a, Complex b, Complex c, double d) { return DiagSSM::with_poles({a}, {b}, {c}, d); }

}  // namespace

TEST_CASE("scan: pass-through and integrator configurations") {
  const std::vector<double> u{1.5, -2.0, 0.25, 4.0, 3.0};
  CHECK(scan_recurrent(scalar_ssm(0.0, 1.0, 1.0, 0.0), u) == u);
  const auto integ = scan_recurrent(scalar_ssm(1.0, 1.0, 1.0, 0.0), u);
  double acc = 0.0;
  for (std::size_t t = 0; t < u.size(); ++t) {
    acc += u[t];
    CHECK(integ[t] == doctest::Approx(acc).epsilon(1e-15));
  }
}

TEST_CASE("scan: shift SSM delays by its read-out position") {
  ShiftSSM s{{0.0, 0.0, 1.0}, 0.0};
  CHECK(scan_recurrent(s, std::vector<double>{5, 7, 9, 11}) == std::vector<double>{0, 0, 5, 7});
  CHECK(materialize_kernel(s, 6).k == std::vector<double>{0, 0, 1, 0, 0, 0});
}

TEST_CASE("kernel of a single decaying pole is geometric") {
  const auto k = materialize_kernel(scalar_ssm(0.5, 1.0, 1.0, 0.0), 4).k;
  CHECK(k == std::vector<double>{1.0, 0.5, 0.25, 0.125});
}

TEST_CASE("diagonal kernel equals dense matrix powers") {
  std::mt19937_64 rng(11);
  const DiagSSM s = DiagSSM::random(8, rng);
  CHECK(max_abs_diff(materialize_kernel(s, 64).k, dense_kernel(s, 64)) < 1e-10);
}

TEST_CASE("conjugate-pair initialization yields a real kernel") {
  std::mt19937_64 rng(12);
  const DiagSSM half = DiagSSM::random(4, rng);
  const ComplexVector a = half.poles();
  ComplexVector poles, b, c;
  for (std::size_t n = 0; n < 4; ++n) {
    poles.push_back(a[n]);
    poles.push_back(std::conj(a[n]));
    b.push_back(half.b[n]);
    b.push_back(std::conj(half.b[n]));
    c.push_back(half.c[n]);
    c.push_back(std::conj(half.c[n]));
  }
  const DiagSSM sym = DiagSSM::with_poles(poles, b, c, 0.0);
  for (const Complex& v : materialize_kernel_complex(sym, 128)) CHECK(std::abs(v.imag()) < 1e-9);
}

TEST_CASE("stable parameterization keeps poles inside the unit circle and kernels enveloped") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const DiagSSM s = DiagSSM::random(16, rng);
    double amax = 0.0, bnorm = 0.0, cnorm = 0.0;
    for (std::size_t n = 0; n < 16; ++n) {
      amax = std::max(amax, std::abs(s.poles()[n]));
      bnorm += std::norm(s.b[n]);
      cnorm += std::norm(s.c[n]);
      CHECK(std::abs(s.poles()[n]) >= 0.85 - 1e-12);
      CHECK(std::abs(s.poles()[n]) <= 0.999 + 1e-12);
    }
    CHECK(amax < 1.0);
    const auto k = materialize_kernel(s, 400).k;
    double envelope = std::sqrt(bnorm * cnorm);
    for (double kj : k) {
      CHECK(std::abs(kj) <= envelope * (1 + 1e-12));
      envelope *= amax;
    }
  }
}

TEST_CASE("convolution path equals the recurrence") {
  std::mt19937_64 rng(14);
  const DiagSSM diag = DiagSSM::random(16, rng);
  const auto u = random_vector(512, rng);
  CHECK(max_abs_diff(forward_conv(diag, u), scan_recurrent(diag, u)) < 1e-8);

  const ShiftSSM shift = ShiftSSM::random(4, rng);
  const auto v = random_vector(128, rng);
  CHECK(max_abs_diff(forward_conv(shift, v), scan_recurrent(shift, v)) < 1e-12);

  const DiagSSM feed = DiagSSM::with_poles({0.9}, {1.0}, {0.0}, 1.0);
  CHECK(max_abs_diff(forward_conv(feed, v), v) < 1e-14);
}

TEST_CASE("stepping reproduces the scan") {
  std::mt19937_64 rng(15);
  const DiagSSM s = DiagSSM::random(8, rng);
  ComplexVector state(8);
  CHECK(step(s, state, 0.0) == 0.0);

  const auto u = random_vector(200, rng);
  const auto ref = scan_recurrent(s, u);
  ComplexVector x(8);
  for (std::size_t t = 0; t < u.size(); ++t) CHECK(std::abs(step(s, x, u[t]) - ref[t]) < 1e-12);

  const DiagSSM ident = scalar_ssm(0.0, 2.0, 0.5, 0.0);
  ComplexVector one(1);
  CHECK(step(ident, one, 3.0) == 3.0);
  CHECK(one[0] == Complex(6.0));

  const ShiftSSM sh = ShiftSSM::random(3, rng);
  std::vector<double> window(3);
  const auto sref = scan_recurrent(sh, u);
  for (std::size_t t = 0; t < u.size(); ++t) CHECK(std::abs(step(sh, window, u[t]) - sref[t]) < 1e-12);

  ComplexVector wrong(3);
  CHECK_THROWS_AS(step(s, wrong, 1.0), ShapeError);
  std::vector<double> wrong_window(5);
  CHECK_THROWS_AS(step(sh, wrong_window, 1.0), ShapeError);
}

TEST_CASE("invalid inputs") {
  std::mt19937_64 rng(16);
  const DiagSSM s = DiagSSM::random(4, rng);
  CHECK_THROWS_AS(scan_recurrent(s, std::vector<double>{}), ShapeError);
  CHECK_THROWS_AS(scan_recurrent(s, std::vector<double>{1.0, std::nan("")}), NumericError);
  CHECK_THROWS_AS(materialize_kernel(s, 0), ShapeError);
  CHECK_THROWS_AS(DiagSSM::with_poles({0.5, 0.5}, {1.0}, {1.0}, 0.0), ShapeError);
}

TEST_CASE("SSM outputs are causal") {
  std::mt19937_64 rng(17);
  const DiagSSM s = DiagSSM::random(16, rng);
  const auto u = random_vector(300, rng);
  const auto scan = scan_recurrent(s, u), conv = forward_conv(s, u);
  for (std::size_t t : {1, 100, 299}) {
    auto p = u;
    p[t] -= 5.0;
    const auto scan2 = scan_recurrent(s, p), conv2 = forward_conv(s, p);
    for (std::size_t i = 0; i < t; ++i) {
      CHECK(scan2[i] == scan[i]);
      CHECK(std::abs(conv2[i] - conv[i]) < 1e-12);
    }
  }
}

TEST_CASE("bank kernel op matches per-channel kernels") {
  std::mt19937_64 rng(18);
  const DiagBank bank = DiagBank::random(3, 5, rng);
  Tape tape(false);
  Context ctx(tape);
  const Tensor& k = diag_bank_kernel(ctx, bank, 40).value();
  for (std::size_t g = 0; g < 3; ++g) {
    const auto ref = materialize_kernel(bank.channel(g), 40).k;
    CHECK(max_abs_diff(std::vector<double>(k.row(g).begin(), k.row(g).end()), ref) < 1e-13);
  }
}

TEST_CASE("grouped convolution: FFT and direct routes agree with forward_conv") {
  std::mt19937_64 rng(19);
  const std::size_t L = 90, groups = 3, per = 2;
  const DiagBank bank = DiagBank::random(groups, 6, rng);
  const Tensor u = random_tensor({L, groups * per}, rng);
  Tape tape(false);
  Context ctx(tape);
  Var kernel = diag_bank_kernel(ctx, bank, L);
  const Tensor y = ops::grouped_causal_conv(ctx.input(u), kernel, ctx.param(bank.d), per).value();
  // Truncating to a short kernel forces the direct route.
  Var short_kernel = diag_bank_kernel(ctx, bank, 20);
  const Tensor ys = ops::grouped_causal_conv(ctx.input(u), short_kernel, ctx.param(bank.d), per).value();
  for (std::size_t ch = 0; ch < groups * per; ++ch) {
    std::vector<double> col(L);
    for (std::size_t t = 0; t < L; ++t) col[t] = u(t, ch);
    const auto ref = forward_conv(bank.channel(ch / per), col);
    for (std::size_t t = 0; t < L; ++t) {
      CHECK(std::abs(y(t, ch) - ref[t]) < 1e-10);
      if (t < 20) CHECK(std::abs(ys(t, ch) - ref[t]) < 1e-10);
    }
  }
}

TEST_CASE("diagonal SSM gradients match finite differences") {
  std::mt19937_64 rng(20);
  for (std::size_t L : {16, 64}) {
    INFO("L = " << L);
    const DiagBank bank = DiagBank::random(1, 4, rng);
    const Tensor u = random_tensor({L, 1}, rng), r = random_tensor({L, 1}, rng);
    const auto result = grad_check(
        [&](Tape&, std::span<const Var> p) {
          Var k = ops::diag_kernel(p[0], p[1], p[2], p[3], p[4], p[5], L);
          return weighted(ops::grouped_causal_conv(p[7], k, p[6], 1), r);
        },
        {bank.log_rate, bank.phase, bank.b_re, bank.b_im, bank.c_re, bank.c_im, bank.d, u});
    CHECK(result.max_relative_error < 1e-4);
  }
}

TEST_CASE("grouped diagonal bank gradients through the FFT route") {
  std::mt19937_64 rng(21);
  const std::size_t L = 48;
  const DiagBank bank = DiagBank::random(2, 3, rng);
  const Tensor u = random_tensor({L, 5 * 2}, rng), r = random_tensor({L, 10}, rng);
  const auto result = grad_check(
      [&](Tape&, std::span<const Var> p) {
        Var k = ops::diag_kernel(p[0], p[1], p[2], p[3], p[4], p[5], L);
        return weighted(ops::grouped_causal_conv(p[7], k, p[6], 5), r);
      },
      {bank.log_rate, bank.phase, bank.b_re, bank.b_im, bank.c_re, bank.c_im, bank.d, u});
  CHECK(result.max_relative_error < 1e-4);
}

TEST_CASE("shift SSM gradients match finite differences") {
  std::mt19937_64 rng(22);
  const ShiftBank bank = ShiftBank::random(3, 4, rng);
  const Tensor u = random_tensor({16, 3}, rng), r = random_tensor({16, 3}, rng);
  const auto result = grad_check(
      [&](Tape&, std::span<const Var> p) { return weighted(ops::grouped_causal_conv(p[2], p[0], p[1], 1), r); },
      {bank.c, bank.d, u});
  CHECK(result.max_relative_error < 1e-4);
}

TEST_CASE("fixed-pole kernels differentiate through b and c only") {
  std::mt19937_64 rng(23);
  DiagBank bank = DiagBank::random(2, 3, rng);
  bank.pole_override = ComplexVector(6, Complex(1.0, 0.0));
  const Tensor r = random_tensor({2, 10}, rng);
  const ComplexVector poles = *bank.pole_override;
  const auto result = grad_check(
      [&](Tape&, std::span<const Var> p) {
        return weighted(ops::diag_kernel_fixed_poles(poles, p[0], p[1], p[2], p[3], 10), r);
      },
      {bank.b_re, bank.b_im, bank.c_re, bank.c_im});
  CHECK(result.max_relative_error < 1e-6);
}
