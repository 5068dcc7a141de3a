#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ch4/attention/attention.hpp"
#include "ch4/h3/h3.hpp"

namespace ch4 {

enum class MixerKind { mhsa, h3, parallel };

std::string to_string(MixerKind kind);
MixerKind parse_mixer_kind(const std::string& name);

struct BlockSpec {
  MixerKind mixer = MixerKind::mhsa;
  // Channel split for MixerKind::parallel: [0, d_mhsa) to MHSA, the rest to H3.
  std::size_t d_mhsa = 0;
  std::size_t d_h3 = 0;
  std::size_t conv_kernel = 15;
  bool causal = false;

  static BlockSpec parallel(std::size_t d_mhsa, std::size_t d_h3, bool causal = false);
};

struct EncoderConfig {
  std::size_t feature_dim = 80;
  std::size_t d = 256;
  std::size_t mhsa_heads = 8;
  std::size_t h3_heads = 2;
  std::size_t shift_state = 4;
  std::size_t diag_state = 16;
  DiagSharing diag_sharing = DiagSharing::per_head;
  // Non-blank tokens; the output layer has vocab + 1 classes with blank = 0.
  std::size_t vocab = 10;
  std::size_t subsample = 4;
  double dropout = 0.1;
  std::vector<BlockSpec> layers;

  bool causal() const { return !layers.empty() && layers.front().causal; }
  void validate() const;
};

// Layers are numbered from the input side; "top" layers are the ones closest
// to the output.
struct H3Placement {
  enum class Kind { top, bottom, mask } kind = Kind::top;
  std::size_t count = 0;
  std::vector<bool> mask;

  static H3Placement top(std::size_t k) { return {Kind::top, k, {}}; }
  static H3Placement bottom(std::size_t k) { return {Kind::bottom, k, {}}; }
  static H3Placement explicit_mask(std::vector<bool> m) { return {Kind::mask, 0, std::move(m)}; }
};

// Replaces `base.layers` with `total_layers` blocks, H3 mixers at the placed
// positions and MHSA elsewhere. Conv width and causality come from
// `base.layers.front()` when present.
EncoderConfig make_ch4_config(std::size_t total_layers, const H3Placement& placement, EncoderConfig base = {});

struct Linear {
  Tensor w, b;  // [in x out], [out]
  static Linear random(std::size_t in, std::size_t out, std::mt19937_64& rng);
  Var forward(Context& ctx, Var x) const;
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct LayerNorm {
  Tensor gain, bias;
  static LayerNorm identity(std::size_t d);
  Var forward(Context& ctx, Var x) const;
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct FeedForward {
  LayerNorm norm;
  Linear up, down;  // d -> 4d -> d
  static FeedForward random(std::size_t d, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct ConvModule {
  LayerNorm norm;
  Linear pointwise_in;  // d -> 2d, gated back to d
  Tensor depthwise_w, depthwise_b;  // [d x k], [d]
  // Offline: batch normalization with running statistics. Causal: per-frame
  // layer normalization (bn_* unused).
  Tensor bn_gain, bn_bias;
  mutable Tensor running_mean, running_var;  // updated by training passes
  LayerNorm frame_norm;
  Linear pointwise_out;  // d -> d
  bool causal = false;

  static ConvModule random(std::size_t d, std::size_t kernel, bool causal, std::mt19937_64& rng);
  std::size_t kernel() const { return depthwise_w.cols(); }
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct ConformerBlock {
  BlockSpec spec;
  FeedForward ffn;
  LayerNorm mixer_norm;
  std::optional<MhsaLayer> mhsa;
  std::optional<H3Layer> h3;
  ConvModule conv;
  double dropout = 0.0;

  static ConformerBlock random(const BlockSpec& spec, const EncoderConfig& cfg, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& f);

  Var forward(Context& ctx, Var x) const;
  Var mixer_forward(Context& ctx, Var x) const;
};

// Channels [0, d_mhsa) through MHSA, [d_mhsa, d) through H3, concatenated in
// that order. A zero-width part is skipped entirely.
Var parallel_mixer_forward(Context& ctx, Var x, std::size_t d_mhsa, const MhsaLayer* mhsa, const H3Layer* h3,
                           AttentionMode mode);

// Two stride-2, width-3 convolutions over time with swish, ×4 time reduction.
// Causal: row j of the output depends on input frames <= 4j.
struct Frontend {
  Linear conv1, conv2;  // [3F x d], [3d x d]
  bool causal = false;
  static Frontend random(std::size_t feature_dim, std::size_t d, bool causal, std::mt19937_64& rng);
  Var forward(Context& ctx, Var features) const;
  void visit(const std::string& prefix, const ParamVisitor& f);
};

std::size_t subsampled_length(std::size_t frames);
// pe[t, 2k] = sin(t / 10000^(2k/d)), pe[t, 2k+1] = cos(...), t counted from `offset`.
Tensor sinusoidal_positions(std::size_t length, std::size_t d, std::size_t offset = 0);

struct Encoder {
  EncoderConfig config;
  Frontend frontend;
  std::vector<ConformerBlock> blocks;
  LayerNorm final_norm;
  Linear head;

  static Encoder random(const EncoderConfig& cfg, std::mt19937_64& rng);
  void visit(const ParamVisitor& f);
  void visit(const ConstParamVisitor& f) const;
  std::size_t parameter_count() const;

  // Features [T x F] -> logits [ceil(T/4) x (vocab + 1)].
  Var forward(Context& ctx, Var features) const;
};

Tensor encoder_forward(const Encoder& encoder, const Tensor& features);

// Frame-synchronous inference of a causal encoder; produces exactly the rows
// of encoder_forward, one per four input frames.
class EncoderStream {
 public:
  explicit EncoderStream(const Encoder& encoder);

  // Returns a logits row when the frame completes one.
  std::optional<std::vector<double>> push(std::span<const double> frame);
  std::size_t frames_seen() const { return frames_; }

 private:
  struct BlockState {
    std::optional<MhsaStreamState> mhsa;
    std::optional<H3StreamState> h3;
    std::vector<double> conv_history;  // (k-1) x d gated inputs, oldest first
  };

  std::vector<double> run_blocks(std::vector<double> x);
  std::vector<double> block_step(const ConformerBlock& block, BlockState& state, std::vector<double> x);

  const Encoder& encoder_;
  std::vector<double> frames_window_;  // last 3 feature frames
  std::vector<double> conv1_window_;   // last 3 first-stage rows
  std::size_t frames_ = 0;
  std::size_t conv1_rows_ = 0;
  std::size_t outputs_ = 0;
  std::vector<BlockState> states_;
};

Tensor encoder_stream(const Encoder& encoder, const Tensor& features);

struct FfnGroupStats {
  std::size_t layer = 0;  // 1-based, mixer layer whose output is measured
  double mhsa_mean = 0.0;
  double h3_mean = 0.0;  // NaN when the group is empty
};

// Mean |W| of the first FFN linear that consumes each parallel mixer's
// output, over input rows fed by MHSA channels and by H3 channels. With the
// FFN -> mixer -> conv block order that FFN belongs to the next block, so the
// last layer has no entry.
std::vector<FfnGroupStats> ffn_weight_group_stats(const Encoder& encoder);

}  // namespace ch4
