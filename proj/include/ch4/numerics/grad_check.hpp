#pragma once

#include <functional>
#include <vector>

#include "ch4/numerics/tape.hpp"

namespace ch4 {

// Builds the checked output on `tape` from one Var per parameter tensor. A
// non-scalar output is checked through the sum of its entries.
using ScalarFn = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares reverse-mode gradients of f at `params` with central differences
// of step `step * max(1, |p|)`.
// Error per entry is |a - n| / max(|a|, |n|, 1e-8); the maximum is returned.
// Output differences are formed entry by entry before summing, so outputs that
// do not depend on a parameter contribute exactly zero.
GradCheckResult grad_check(const ScalarFn& f, const std::vector<Tensor>& params, double step = 1e-5);

class Context;
using ModuleFn = std::function<Var(Context& ctx)>;

// Same check for a module whose parameters are bound through Context::param.
// The tensors are perturbed in place and restored.
GradCheckResult grad_check_params(const ModuleFn& f, const std::vector<Tensor*>& params, double step = 1e-5);

}  // namespace ch4
