#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "ch4/numerics/context.hpp"
#include "ch4/ssm/ssm_bank.hpp"

namespace ch4 {

// How the diagonal SSM bank over the d_h x d_h key/value interactions of a
// head is parameterized.
enum class DiagSharing { per_head, per_entry };

struct H3Config {
  std::size_t d = 0;
  std::size_t heads = 2;
  std::size_t shift_state = 4;
  std::size_t diag_state = 16;
  DiagSharing sharing = DiagSharing::per_head;

  std::size_t head_dim() const { return d / heads; }
  std::size_t interaction_channels() const { return heads * head_dim() * head_dim(); }
  std::size_t diag_groups() const { return sharing == DiagSharing::per_head ? heads : interaction_channels(); }
  std::size_t diag_group_size() const { return interaction_channels() / diag_groups(); }
  void validate() const;
};

// Q . SSM_diag(SSM_shift(K) . V) per head: keys pass through a shift SSM per
// channel, each head forms the outer product K'_t V_t^T, a diagonal SSM runs
// over every entry of that product in time, and queries contract the result.
// No normalization; all projections are bias-free [d x d].
struct H3Layer {
  H3Config config;
  Tensor wq, wk, wv, wo;
  ShiftBank shift;  // d channels
  DiagBank diag;    // config.diag_groups() groups

  static H3Layer random(const H3Config& config, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& f);

  Var forward(Context& ctx, Var x) const;
};

Tensor h3_forward(const H3Layer& layer, const Tensor& x);

struct H3StreamState {
  std::vector<double> shift;   // d x shift_state windows
  ComplexVector diag;          // heads x d_h x d_h x diag_state
  ComplexVector poles;         // cached poles of the diagonal bank
};

H3StreamState make_stream_state(const H3Layer& layer);
// One time step; constant cost in the position t.
std::vector<double> h3_step(const H3Layer& layer, H3StreamState& state, std::span<const double> x);

// Closed-form floating-point operation counts of one full-sequence forward
// pass through the FFT route.
struct H3FlopEstimate {
  double projections = 0;
  double shift_ssm = 0;
  double outer_product = 0;
  double diag_kernel = 0;  // kernel materialization, per group
  double diag_conv = 0;    // FFT convolution and feed-through, per channel
  double contraction = 0;
  double total() const { return projections + shift_ssm + outer_product + diag_kernel + diag_conv + contraction; }
};

// Cost of one complex radix-2 transform of size n (n >= 2).
double fft_flops(std::size_t n);
H3FlopEstimate h3_flop_estimate(const H3Config& config, std::size_t length);

namespace ops {

// [L x d] keys and values -> [L x heads*dh*dh], entry (h, i, j) = k[h*dh+i] v[h*dh+j].
Var head_outer(Var k, Var v, std::size_t heads);
// out[t, h*dh+j] = sum_i q[t, h*dh+i] s[t, (h, i, j)].
Var head_contract(Var q, Var s, std::size_t heads);

}  // namespace ops

}  // namespace ch4
