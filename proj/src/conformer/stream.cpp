#include <cmath>

#include "ch4/conformer/conformer.hpp"
#include "ch4/error.hpp"

namespace ch4 {

namespace {

using Vec = std::vector<double>;

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }
double swish(double x) { return x * sigmoid(x); }

Vec linear(const Linear& l, std::span<const double> x) {
  const std::size_t n = l.w.cols();
  Vec y(l.b.data().begin(), l.b.data().end());
  const double* w = l.w.data().data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = x[i];
    const double* row = w + i * n;
    for (std::size_t j = 0; j < n; ++j) y[j] += s * row[j];
  }
  return y;
}

Vec layer_norm(const LayerNorm& ln, std::span<const double> x) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0, var = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + 1e-5);
  Vec y(x.size());
  for (std::size_t c = 0; c < x.size(); ++c) y[c] = (x[c] - mean) * inv * ln.gain[c] + ln.bias[c];
  return y;
}

void add_into(Vec& x, const Vec& y) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
}

// Drops the oldest of `width` rows of size n and appends `row`.
void push_row(Vec& window, std::span<const double> row) {
  const std::size_t n = row.size();
  std::copy(window.begin() + static_cast<long>(n), window.end(), window.begin());
  std::copy(row.begin(), row.end(), window.end() - static_cast<long>(n));
}

}  // namespace

EncoderStream::EncoderStream(const Encoder& encoder) : encoder_(encoder) {
  const EncoderConfig& cfg = encoder.config;
  if (!cfg.causal()) throw ConfigError("streaming inference requires a causal encoder");
  frames_window_.assign(3 * cfg.feature_dim, 0.0);
  conv1_window_.assign(3 * cfg.d, 0.0);
  for (const ConformerBlock& b : encoder.blocks) {
    BlockState s;
    if (b.mhsa) s.mhsa.emplace();
    if (b.h3) s.h3 = make_stream_state(*b.h3);
    s.conv_history.assign((b.conv.kernel() - 1) * cfg.d, 0.0);
    states_.push_back(std::move(s));
  }
}

std::optional<std::vector<double>> EncoderStream::push(std::span<const double> frame) {
  const EncoderConfig& cfg = encoder_.config;
  if (frame.size() != cfg.feature_dim) throw ShapeError("stream: frame has the wrong feature dimension");
  for (double v : frame)
    if (!std::isfinite(v)) throw NumericError("stream: non-finite feature value");
  push_row(frames_window_, frame);
  const bool stage1 = frames_++ % 2 == 0;
  if (!stage1) return std::nullopt;

  Vec h = linear(encoder_.frontend.conv1, frames_window_);
  for (double& v : h) v = swish(v);
  push_row(conv1_window_, h);
  if (conv1_rows_++ % 2) return std::nullopt;

  Vec x = linear(encoder_.frontend.conv2, conv1_window_);
  for (double& v : x) v = swish(v);
  const Tensor pe = sinusoidal_positions(1, cfg.d, outputs_++);
  for (std::size_t c = 0; c < cfg.d; ++c) x[c] += pe[c];
  return run_blocks(std::move(x));
}

std::vector<double> EncoderStream::run_blocks(std::vector<double> x) {
  for (std::size_t i = 0; i < encoder_.blocks.size(); ++i) x = block_step(encoder_.blocks[i], states_[i], std::move(x));
  return linear(encoder_.head, layer_norm(encoder_.final_norm, x));
}

std::vector<double> EncoderStream::block_step(const ConformerBlock& block, BlockState& state, std::vector<double> x) {
  const std::size_t d = x.size();

  Vec h = linear(block.ffn.up, layer_norm(block.ffn.norm, x));
  for (double& v : h) v = swish(v);
  add_into(x, linear(block.ffn.down, h));

  const Vec m = layer_norm(block.mixer_norm, x);
  const std::span<const double> ms(m);
  switch (block.spec.mixer) {
    case MixerKind::mhsa: add_into(x, mhsa_step(*block.mhsa, *state.mhsa, ms)); break;
    case MixerKind::h3: add_into(x, h3_step(*block.h3, *state.h3, ms)); break;
    case MixerKind::parallel: {
      const std::size_t split = block.spec.d_mhsa;
      Vec out;
      if (block.mhsa) out = mhsa_step(*block.mhsa, *state.mhsa, ms.subspan(0, split));
      if (block.h3) {
        const Vec y = h3_step(*block.h3, *state.h3, ms.subspan(split));
        out.insert(out.end(), y.begin(), y.end());
      }
      add_into(x, out);
      break;
    }
  }

  const ConvModule& conv = block.conv;
  const Vec p = linear(conv.pointwise_in, layer_norm(conv.norm, x));
  Vec g(d);
  for (std::size_t c = 0; c < d; ++c) g[c] = p[c] * sigmoid(p[c + d]);
  const std::size_t k = conv.kernel();
  Vec y(d);
  for (std::size_t c = 0; c < d; ++c) {
    double s = conv.depthwise_b[c];
    for (std::size_t m = 0; m + 1 < k; ++m) s += conv.depthwise_w(c, m) * state.conv_history[m * d + c];
    y[c] = s + conv.depthwise_w(c, k - 1) * g[c];
  }
  if (k > 1) push_row(state.conv_history, g);
  y = layer_norm(conv.frame_norm, y);
  for (double& v : y) v = swish(v);
  add_into(x, linear(conv.pointwise_out, y));
  return x;
}

Tensor encoder_stream(const Encoder& encoder, const Tensor& features) {
  EncoderStream stream(encoder);
  Tensor out({subsampled_length(features.rows()), encoder.config.vocab + 1});
  std::size_t row = 0;
  for (std::size_t t = 0; t < features.rows(); ++t)
    if (auto logits = stream.push(features.row(t))) {
      std::copy(logits->begin(), logits->end(), out.data().begin() + static_cast<long>(row * out.cols()));
      ++row;
    }
  return out;
}

}  // namespace ch4
