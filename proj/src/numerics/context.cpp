#include "ch4/numerics/context.hpp"

namespace ch4 {

Var Context::param(const Tensor& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return it->second;
  Var v = grads_ && tape_.grad_enabled() ? tape_.leaf(p, &(*grads_)[&p]) : tape_.constant(p);
  bound_.emplace(&p, v);
  return v;
}

}  // namespace ch4
