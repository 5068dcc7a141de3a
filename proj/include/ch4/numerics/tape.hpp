#pragma once

#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

#include "ch4/numerics/tensor.hpp"

namespace ch4 {

class Tape;

// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Accumulates the gradient of one output into the gradients of the inputs.
// grad_in[k] is null when input k does not require a gradient.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

// Reverse-mode recording of executed operations. A tape belongs to a single
// thread; nodes are kept in execution order and replayed backwards.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor value);
  // A differentiable input. After backward() its gradient is added to `sink`
  // when one is given.
  Var leaf(Tensor value, Tensor* sink = nullptr);
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  // Gradient of the last backward() pass, or null.
  const Tensor* grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  void backward(Var loss);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
    Tensor* sink = nullptr;
  };

  const Node& node(Var v) const;

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

}  // namespace ch4
