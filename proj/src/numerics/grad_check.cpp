#include "ch4/numerics/grad_check.hpp"

#include <cmath>

#include "ch4/error.hpp"
#include "ch4/numerics/context.hpp"
#include "ch4/numerics/ops.hpp"

namespace ch4 {
namespace {

Tensor evaluate(const ScalarFn& f, const std::vector<Tensor>& params) {
  Tape tape(false);
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(tape.constant(p));
  Tensor out = f(tape, vars).value();
  if (!out.all_finite()) throw NumericError("grad_check: non-finite function value");
  return out;
}

double relative_error(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8}); }

double scaled_step(double step, double x) { return step * std::max(1.0, std::abs(x)); }

double summed_difference(const Tensor& up, const Tensor& down) {
  double diff = 0.0;
  for (std::size_t k = 0; k < up.size(); ++k) diff += up[k] - down[k];
  return diff;
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, const std::vector<Tensor>& params, double step) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& p : params) vars.push_back(tape.leaf(p));
    Var out = f(tape, vars);
    tape.backward(out.value().size() == 1 ? out : ops::sum(out));
    for (const Var& v : vars) analytic.push_back(*tape.grad(v));
  }

  GradCheckResult result;
  std::vector<Tensor> probe = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double original = probe[p][i];
      const double h = scaled_step(step, original);
      probe[p][i] = original + h;
      const Tensor up = evaluate(f, probe);
      probe[p][i] = original - h;
      const Tensor down = evaluate(f, probe);
      probe[p][i] = original;
      const double numeric = summed_difference(up, down) / (2.0 * h);
      const double a = analytic[p][i];
      const double err = relative_error(a, numeric);
      if (err > result.max_relative_error || (p == 0 && i == 0)) {
        result = {err, p, i, a, numeric};
      }
    }
  }
  return result;
}

GradCheckResult grad_check_params(const ModuleFn& f, const std::vector<Tensor*>& params, double step) {
  GradStore grads;
  {
    Tape tape;
    Context ctx(tape, &grads);
    Var out = f(ctx);
    tape.backward(out.value().size() == 1 ? out : ops::sum(out));
  }
  auto evaluate_module = [&] {
    Tape tape(false);
    Context ctx(tape);
    Tensor out = f(ctx).value();
    if (!out.all_finite()) throw NumericError("grad_check: non-finite function value");
    return out;
  };

  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& param = *params[p];
    const auto it = grads.find(params[p]);
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double original = param[i];
      const double h = scaled_step(step, original);
      param[i] = original + h;
      const Tensor up = evaluate_module();
      param[i] = original - h;
      const Tensor down = evaluate_module();
      param[i] = original;
      const double numeric = summed_difference(up, down) / (2.0 * h);
      const double a = it == grads.end() ? 0.0 : it->second[i];
      const double err = relative_error(a, numeric);
      if (err > result.max_relative_error || (p == 0 && i == 0)) result = {err, p, i, a, numeric};
    }
  }
  return result;
}

}  // namespace ch4
