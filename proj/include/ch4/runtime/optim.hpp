#pragma once

#include <map>
#include <string>
#include <vector>

#include "ch4/numerics/context.hpp"
#include "ch4/runtime/config.hpp"

namespace ch4 {

// Linear warmup over the first warmup_fraction of steps to max_lr, then
// cosine decay reaching 0 at the last step.
double learning_rate(const OptimizerConfig& cfg, std::size_t step, std::size_t total_steps);

struct NamedParam {
  std::string name;
  Tensor* tensor;
};

std::vector<NamedParam> trainable_parameters(Encoder& encoder);

// Scales the gradients of params so their joint L2 norm is at most max_norm; returns
// the norm before clipping.
double clip_gradients(const std::vector<NamedParam>& params, GradStore& grads, double max_norm);

// Adam moments with decoupled weight decay applied to every parameter:
// p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p).
class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg) : cfg_(cfg) {}

  // Parameters without an entry in `grads` are treated as having zero gradient.
  void step(const std::vector<NamedParam>& params, const GradStore& grads, double lr);
  std::size_t steps() const { return t_; }

  // Moment tensors by parameter name, for checkpoints.
  std::map<std::string, Tensor>& first_moments() { return m_; }
  std::map<std::string, Tensor>& second_moments() { return v_; }
  void set_steps(std::size_t t) { t_ = t; }

 private:
  OptimizerConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

}  // namespace ch4
