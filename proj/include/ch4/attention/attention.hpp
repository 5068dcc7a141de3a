#pragma once

#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ch4/numerics/context.hpp"

namespace ch4 {

enum class AttentionMode { bidirectional, causal };

// Bias-free projections, weights stored [d x d] and applied as x W.
struct MhsaLayer {
  std::size_t d = 0;
  std::size_t heads = 8;
  Tensor wq, wk, wv, wo;

  static MhsaLayer random(std::size_t d, std::size_t heads, std::mt19937_64& rng);
  std::size_t head_dim() const { return d / heads; }
  void validate() const;
  void visit(const std::string& prefix, const ParamVisitor& f);

  Var forward(Context& ctx, Var x, AttentionMode mode) const;
};

Tensor mhsa_forward(const MhsaLayer& layer, const Tensor& x, AttentionMode mode);

// Causal streaming attention over a growing key/value cache.
struct MhsaStreamState {
  std::vector<double> keys;    // t x d
  std::vector<double> values;  // t x d
  std::size_t length = 0;
};

std::vector<double> mhsa_step(const MhsaLayer& layer, MhsaStreamState& state, std::span<const double> x);

// Elementwise feature map for linear attention; must be strictly positive.
struct FeatureMap {
  std::function<double(double)> apply;
  // Default 1 + softplus(x).
  static FeatureMap positive();
};

// O_i = phi(Q_i)^T S_i / phi(Q_i)^T z_i with running S_i = sum_{j<=i} phi(K_j) V_j^T
// and z_i = sum_{j<=i} phi(K_j). Q, K are [L x dk], V is [L x dv].
Tensor linear_attention_forward(const Tensor& q, const Tensor& k, const Tensor& v,
                                const FeatureMap& phi = FeatureMap::positive());

namespace ops {

// Scaled dot-product softmax attention per head over pre-projected q, k, v
// ([L x d] each, heads taking consecutive column blocks).
Var softmax_attention(Var q, Var k, Var v, std::size_t heads, AttentionMode mode);

// Normalized causal linear attention over already-mapped features.
Var linear_attention(Var phi_q, Var phi_k, Var v);

}  // namespace ops

}  // namespace ch4
