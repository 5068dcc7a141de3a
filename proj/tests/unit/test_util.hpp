#pragma once

#include <random>

#include "ch4/numerics/tensor.hpp"

namespace ch4::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = normal(rng);
  return t;
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

}  // namespace ch4::testing

#include "ch4/numerics/ops.hpp"

namespace ch4::testing {

// Elementwise product with fixed random weights; a non-scalar grad_check
// target that sums to a generic linear functional of `x`.
inline Var weighted(Var x, const Tensor& w) { return ops::mul(x, x.tape->constant(w)); }

}  // namespace ch4::testing
