#pragma once

#include <functional>
#include <random>
#include <string>
#include <unordered_map>

#include "ch4/numerics/tape.hpp"

namespace ch4 {

// Gradient buffers keyed by the parameter tensor they belong to.
using GradStore = std::unordered_map<const Tensor*, Tensor>;

// Visitor over named model tensors. `trainable` is false for buffers such as
// running statistics, which are saved but not optimized.
using ParamVisitor = std::function<void(const std::string& name, Tensor& tensor, bool trainable)>;
using ConstParamVisitor = std::function<void(const std::string& name, const Tensor& tensor, bool trainable)>;

// Everything a module's differentiable forward pass needs: the tape, where
// parameter gradients go, and whether stochastic training behavior is on.
class Context {
 public:
  explicit Context(Tape& tape, GradStore* grads = nullptr, bool training = false, std::uint64_t seed = 0)
      : tape_(tape), grads_(grads), training_(training), rng_(seed) {}

  Tape& tape() { return tape_; }
  bool training() const { return training_; }
  void set_training(bool training) { training_ = training; }
  std::mt19937_64& rng() { return rng_; }

  // Binds a parameter tensor to the tape, once per tensor. Parameters are
  // differentiable only when a gradient store is attached.
  Var param(const Tensor& p);
  Var input(Tensor value) { return tape_.constant(std::move(value)); }

 private:
  Tape& tape_;
  GradStore* grads_;
  bool training_;
  std::mt19937_64 rng_;
  std::unordered_map<const Tensor*, Var> bound_;
};

}  // namespace ch4
