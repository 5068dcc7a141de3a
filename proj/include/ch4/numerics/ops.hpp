#pragma once

#include <functional>
#include <random>

#include "ch4/numerics/tape.hpp"

// Differentiable primitives. Every op records on the tape of its inputs and
// carries a hand-written backward pass. Matrices are [rows x cols] row-major;
// sequences are laid out as [time x channels].
namespace ch4::ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// a[r, c] + bias[c]
Var add_row(Var a, Var bias);
// a[m x k] * b[k x n]
Var matmul(Var a, Var b);
Var sum(Var a);
// sum(a .* w) with w treated as a constant.
Var weighted_sum(Var a, const Tensor& w);

Var sigmoid(Var a);
Var swish(Var a);
// Strictly positive smooth map 1 + softplus(x).
Var positive_feature(Var a);
// Gated linear unit over the last axis: first half * sigmoid(second half).
Var glu(Var a);

// Per-row normalization over columns followed by gain/bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
// Per-column normalization using statistics of the rows of x.
Var batch_norm(Var x, Var gain, Var bias, double eps = 1e-5);
// Per-column normalization with fixed statistics.
Var batch_norm_fixed(Var x, const Tensor& mean, const Tensor& var, Var gain, Var bias, double eps = 1e-5);

// Stacks zero-padded windows of `width` frames taken every `stride` frames:
// [T x C] -> [T' x width*C], T' = (T + pad_left + pad_right - width) / stride + 1.
Var unfold_time(Var x, std::size_t width, std::size_t stride, std::size_t pad_left, std::size_t pad_right);
// Per-channel temporal convolution, weight [C x width], bias [C]:
// y[t, c] = bias[c] + sum_m w[c, m] * x[t - pad_left + m, c].
Var depthwise_conv(Var x, Var weight, Var bias, std::size_t pad_left);

Var slice_cols(Var x, std::size_t begin, std::size_t end);
Var concat_cols(Var a, Var b);

Var dropout(Var x, double rate, std::mt19937_64& rng);
Var cumsum(Var x, std::size_t axis);

}  // namespace ch4::ops
