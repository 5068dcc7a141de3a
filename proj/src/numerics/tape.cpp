#include "ch4/numerics/tape.hpp"

#include "ch4/error.hpp"

namespace ch4 {

Var Tape::constant(Tensor value) {
  value.check_finite("constant");
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::leaf(Tensor value, Tensor* sink) {
  value.check_finite("leaf");
  Node n;
  n.value = std::move(value);
  n.is_leaf = true;
  n.requires_grad = grad_enabled_;
  n.sink = grad_enabled_ ? sink : nullptr;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite value produced");
  Node n;
  n.value = std::move(value);
  for (const Var& in : inputs) {
    if (in.tape != this) throw Error(std::string(op) + ": input recorded on a different tape");
    if (in.id >= nodes_.size()) throw Error(std::string(op) + ": dangling input");
    n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
  }
  if (n.requires_grad) {
    n.inputs.reserve(inputs.size());
    for (const Var& in : inputs) n.inputs.push_back(in.id);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) throw Error("variable is not recorded on this tape");
  return nodes_[v.id];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

const Tensor* Tape::grad(Var v) const {
  const Node& n = node(v);
  return n.grad.empty() && !n.value.empty() ? nullptr : &n.grad;
}

void Tape::backward(Var loss) {
  const Node& out = node(loss);
  if (out.value.size() != 1) throw ShapeError("backward: loss must be a scalar, got " + shape_string(out.value.shape()));
  for (Node& n : nodes_) n.grad = Tensor();
  if (!out.requires_grad) return;

  nodes_[loss.id].grad = Tensor(out.value.shape(), 1.0);
  std::vector<Tensor*> grad_in;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    grad_in.assign(n.inputs.size(), nullptr);
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      Node& in = nodes_[n.inputs[k]];
      if (!in.requires_grad) continue;
      if (in.grad.empty()) in.grad = Tensor::zeros_like(in.value);
      grad_in[k] = &in.grad;
    }
    n.backward(n.grad, grad_in);
  }
  for (Node& n : nodes_) {
    if (!n.is_leaf || !n.requires_grad) continue;
    if (n.grad.empty()) n.grad = Tensor::zeros_like(n.value);
    if (n.sink) {
      if (n.sink->empty()) *n.sink = Tensor::zeros_like(n.value);
      *n.sink += n.grad;
    }
  }
}

}  // namespace ch4
