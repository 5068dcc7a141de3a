#include <cmath>

#include "ch4/error.hpp"
#include "ch4/numerics/fft.hpp"
#include "ch4/numerics/grad_check.hpp"
#include "ch4/numerics/ops.hpp"
#include "doctest.h"
#include "unit/test_util.hpp"

using namespace ch4;
using ch4::testing::random_tensor;
using ch4::testing::weighted;
using ch4::testing::random_vector;

namespace {

ComplexVector random_complex(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  ComplexVector v(n);
  for (auto& x : v) x = {normal(rng), normal(rng)};
  return v;
}

std::vector<double> naive_causal_convolve(const std::vector<double>& u, const std::vector<double>& k) {
  std::vector<double> y(u.size());
  for (std::size_t t = 0; t < u.size(); ++t)
    for (std::size_t j = 0; j <= t; ++j) y[t] += k[t - j] * u[j];
  return y;
}

}  // namespace

TEST_CASE("fft of a delta is flat and of a constant is a DC spike") {
  const ComplexVector delta{1, 0, 0, 0};
  for (const Complex& v : fft(delta)) CHECK(std::abs(v - Complex(1.0)) < 1e-15);

  const double c = 2.5;
  const ComplexVector constant(4, c);
  const ComplexVector f = fft(constant);
  CHECK(std::abs(f[0] - Complex(4 * c)) < 1e-14);
  for (std::size_t i = 1; i < 4; ++i) CHECK(std::abs(f[i]) < 1e-14);
}

TEST_CASE("ifft inverts fft") {
  std::mt19937_64 rng(1);
  const ComplexVector x = random_complex(64, rng);
  const ComplexVector back = ifft(fft(x));
  double err = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) err = std::max(err, std::abs(back[i] - x[i]));
  CHECK(err < 1e-10);
}

TEST_CASE("fft pads to the next power of two and rejects empty input") {
  CHECK(fft(ComplexVector(5, 1.0)).size() == 8);
  CHECK_THROWS_AS(fft(ComplexVector{}), ShapeError);
  CHECK_THROWS_AS(ifft(ComplexVector{}), ShapeError);
}

TEST_CASE("fft is linear and satisfies Parseval") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const ComplexVector x = random_complex(128, rng), y = random_complex(128, rng);
    const Complex alpha(0.7, -1.3), beta(-2.0, 0.25);
    ComplexVector mix(128);
    for (std::size_t i = 0; i < 128; ++i) mix[i] = alpha * x[i] + beta * y[i];
    const ComplexVector fx = fft(x), fy = fft(y), fm = fft(mix);
    double err = 0.0;
    for (std::size_t i = 0; i < 128; ++i) err = std::max(err, std::abs(fm[i] - (alpha * fx[i] + beta * fy[i])));
    CHECK(err < 1e-9);

    double energy = 0.0, spectral = 0.0;
    for (std::size_t i = 0; i < 128; ++i) {
      energy += std::norm(x[i]);
      spectral += std::norm(fx[i]);
    }
    CHECK(std::abs(energy - spectral / 128.0) / energy < 1e-9);
  }
}

TEST_CASE("fft is bit-exact across repeated calls") {
  std::mt19937_64 rng(3);
  const ComplexVector x = random_complex(256, rng);
  CHECK(fft(x) == fft(x));
}

TEST_CASE("causal_convolve small cases") {
  const std::vector<double> u{3.0, -1.0, 4.0};
  const auto y = causal_convolve(u, std::vector<double>{1, 0, 0});
  for (std::size_t i = 0; i < 3; ++i) CHECK(y[i] == doctest::Approx(u[i]).epsilon(1e-14));

  const auto delayed = causal_convolve(std::vector<double>{1, 1, 1}, std::vector<double>{0, 1, 0});
  CHECK(std::abs(delayed[0]) < 1e-15);
  CHECK(delayed[1] == doctest::Approx(1.0));
  CHECK(delayed[2] == doctest::Approx(1.0));

  CHECK_THROWS_AS(causal_convolve(std::vector<double>{1, 2}, std::vector<double>{1}), ShapeError);
}

TEST_CASE("causal_convolve matches the naive double loop") {
  std::mt19937_64 rng(4);
  const auto u = random_vector(257, rng), k = random_vector(257, rng);
  CHECK(max_abs_diff(causal_convolve(u, k), naive_causal_convolve(u, k)) < 1e-9);
}

TEST_CASE("causal_convolve output never depends on later inputs") {
  std::mt19937_64 rng(5);
  const auto u = random_vector(100, rng), k = random_vector(100, rng);
  const auto base = causal_convolve(u, k);
  for (std::size_t t : {0, 17, 50, 99}) {
    auto perturbed = u;
    perturbed[t] += 10.0;
    const auto y = causal_convolve(perturbed, k);
    for (std::size_t s = 0; s < t; ++s) CHECK(std::abs(y[s] - base[s]) < 1e-12);
    CHECK(std::abs(y[t] - base[t]) > 1e-3);
  }
}

TEST_CASE("cumsum") {
  const Tensor x = Tensor::vector({1, 2, 3});
  CHECK(cumsum(x, 0) == Tensor::vector({1, 3, 6}));
  CHECK(cumsum(Tensor({3, 2}), 1) == Tensor({3, 2}));
  CHECK_THROWS_AS(cumsum(x, 1), ShapeError);

  std::mt19937_64 rng(6);
  const Tensor m = random_tensor({4, 5}, rng);
  const Tensor c = cumsum(m, 0);
  for (std::size_t col = 0; col < 5; ++col) {
    double acc = 0.0;
    for (std::size_t r = 0; r < 4; ++r) {
      acc += m(r, col);
      CHECK(c(r, col) == acc);
    }
  }
}

TEST_CASE("backward of sum and of a square") {
  std::mt19937_64 rng(7);
  const Tensor x0 = random_tensor({3, 4}, rng);
  {
    Tape tape;
    Var x = tape.leaf(x0);
    tape.backward(ops::sum(x));
    for (double g : tape.grad(x)->data()) CHECK(g == 1.0);
  }
  {
    Tape tape;
    Var x = tape.leaf(x0);
    tape.backward(ops::sum(ops::mul(x, x)));
    const Tensor& g = *tape.grad(x);
    for (std::size_t i = 0; i < x0.size(); ++i) CHECK(g[i] == doctest::Approx(2 * x0[i]).epsilon(1e-15));
  }
}

TEST_CASE("backward errors and leaf bookkeeping") {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1, 2}));
  Var unused = tape.leaf(Tensor::vector({5}));
  CHECK_THROWS_AS(tape.backward(x), ShapeError);

  Tape other;
  Var y = other.leaf(Tensor::scalar(1.0));
  CHECK_THROWS_AS(tape.backward(y), Error);
  CHECK_THROWS_AS(ops::add(x, other.leaf(Tensor::vector({1, 1}))), Error);

  Tensor sink;
  Var z = tape.leaf(Tensor::vector({3, 4}), &sink);
  tape.backward(ops::sum(ops::mul(x, z)));
  REQUIRE(tape.grad(unused) != nullptr);
  CHECK(tape.grad(unused)->values() == std::vector<double>{0.0});
  CHECK(sink.values() == std::vector<double>{1.0, 2.0});
}

TEST_CASE("non-finite results raise instead of propagating") {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1e308, 1e308}));
  CHECK_THROWS_AS(ops::scale(x, 10.0), NumericError);
  CHECK_THROWS_AS(tape.constant(Tensor::vector({std::nan("")})), NumericError);
}

TEST_CASE("grad_check is exact for a linear map") {
  std::mt19937_64 rng(8);
  const Tensor w = random_tensor({3, 4}, rng), x = random_tensor({2, 3}, rng), r = random_tensor({2, 4}, rng);
  const auto result = grad_check(
      [&](Tape&, std::span<const Var> p) { return weighted(ops::matmul(p[1], p[0]), r); }, {w, x});
  CHECK(result.max_relative_error < 1e-8);
}

TEST_CASE("primitive ops pass the finite-difference check") {
  std::mt19937_64 rng(9);
  const Tensor a = random_tensor({5, 6}, rng), b = random_tensor({5, 6}, rng);
  const Tensor gain = random_tensor({6}, rng), bias = random_tensor({6}, rng);
  const Tensor r6 = random_tensor({5, 6}, rng), r3 = random_tensor({5, 3}, rng);

  auto check = [](const char* name, const ScalarFn& f, const std::vector<Tensor>& params) {
    INFO(name);
    CHECK(grad_check(f, params).max_relative_error < 1e-6);
  };

  check("add/sub/mul", [&](Tape&, std::span<const Var> p) {
    return weighted(ops::mul(ops::add(p[0], p[1]), ops::sub(p[0], ops::scale(p[1], 0.3))), r6);
  }, {a, b});
  check("add_row", [&](Tape&, std::span<const Var> p) { return weighted(ops::add_row(p[0], p[1]), r6); },
        {a, bias});
  check("sigmoid/swish/positive_feature", [&](Tape&, std::span<const Var> p) {
    return weighted(ops::add(ops::swish(p[0]), ops::mul(ops::sigmoid(p[0]), ops::positive_feature(p[0]))), r6);
  }, {a});
  check("glu", [&](Tape&, std::span<const Var> p) { return weighted(ops::glu(p[0]), r3); }, {a});
  check("layer_norm", [&](Tape&, std::span<const Var> p) {
    return weighted(ops::layer_norm(p[0], p[1], p[2]), r6);
  }, {a, gain, bias});
  check("batch_norm", [&](Tape&, std::span<const Var> p) {
    return weighted(ops::batch_norm(p[0], p[1], p[2]), r6);
  }, {a, gain, bias});
  const Tensor mean = random_tensor({6}, rng);
  Tensor var({6}, 0.7);
  check("batch_norm_fixed", [&](Tape&, std::span<const Var> p) {
    return weighted(ops::batch_norm_fixed(p[0], mean, var, p[1], p[2]), r6);
  }, {a, gain, bias});

  const Tensor unfold_w = random_tensor({3, 18}, rng);
  check("unfold_time", [&](Tape&, std::span<const Var> p) {
    return weighted(ops::unfold_time(p[0], 3, 2, 2, 0), unfold_w);
  }, {a});
  const Tensor dw = random_tensor({6, 4}, rng);
  check("depthwise_conv", [&](Tape&, std::span<const Var> p) {
    return weighted(ops::depthwise_conv(p[0], p[1], p[2], 3), r6);
  }, {a, dw, bias});
  const Tensor r8 = random_tensor({5, 8}, rng);
  check("slice/concat", [&](Tape&, std::span<const Var> p) {
    return weighted(ops::concat_cols(ops::slice_cols(p[0], 1, 4), ops::slice_cols(p[1], 1, 6)), r8);
  }, {a, b});
  check("cumsum", [&](Tape&, std::span<const Var> p) {
    return weighted(ops::add(ops::cumsum(p[0], 0), ops::cumsum(p[0], 1)), r6);
  }, {a});
}

TEST_CASE("unfold_time and depthwise_conv layouts") {
  Tape tape(false);
  Var x = tape.constant(Tensor::matrix(5, 1, {1, 2, 3, 4, 5}));
  const Tensor& u = ops::unfold_time(x, 3, 2, 2, 0).value();
  CHECK(u == Tensor::matrix(3, 3, {0, 0, 1, 1, 2, 3, 3, 4, 5}));
  Var w = tape.constant(Tensor::matrix(1, 2, {1, 10}));
  Var bias = tape.constant(Tensor::vector({0}));
  CHECK(ops::depthwise_conv(x, w, bias, 1).value() == Tensor::matrix(5, 1, {10, 21, 32, 43, 54}));
}
