#include "ch4/numerics/ops.hpp"

#include <cmath>

#include "ch4/error.hpp"

namespace ch4::ops {
namespace {

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

void require_matrix(const char* op, Var a) {
  if (a.value().rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw Error("operands recorded on different tapes");
  return *a.tape;
}

template <class F, class D>
Var unary(const char* op, Var a, F f, D df) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.tape->record(op, std::move(y), {a}, [a, df](const Tensor& g, std::span<Tensor* const> gin) {
    const Tensor& x = a.value();
    Tensor& gx = *gin[0];
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[i] * df(x[i]);
  });
}

double sigmoid_value(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  Tensor y = a.value();
  y += b.value();
  return tape_of(a, b).record("add", std::move(y), {a, b}, [](const Tensor& g, std::span<Tensor* const> gin) {
    if (gin[0]) *gin[0] += g;
    if (gin[1]) *gin[1] += g;
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return tape_of(a, b).record("sub", std::move(y), {a, b}, [](const Tensor& g, std::span<Tensor* const> gin) {
    if (gin[0]) *gin[0] += g;
    if (gin[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return tape_of(a, b).record("mul", std::move(y), {a, b}, [a, b](const Tensor& g, std::span<Tensor* const> gin) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * bv[i];
    if (gin[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * av[i];
  });
}

Var scale(Var a, double s) {
  Tensor y = a.value();
  y *= s;
  return a.tape->record("scale", std::move(y), {a}, [s](const Tensor& g, std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += s * g[i];
  });
}

Var add_row(Var a, Var bias) {
  require_matrix("add_row", a);
  const std::size_t rows = a.value().rows(), cols = a.value().cols();
  if (bias.value().size() != cols)
    throw ShapeError("add_row: bias length " + std::to_string(bias.value().size()) + " != " + std::to_string(cols));
  Tensor y = a.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) y(r, c) += bv[c];
  return tape_of(a, bias).record("add_row", std::move(y), {a, bias},
                                 [rows, cols](const Tensor& g, std::span<Tensor* const> gin) {
                                   if (gin[0]) *gin[0] += g;
                                   if (gin[1])
                                     for (std::size_t r = 0; r < rows; ++r)
                                       for (std::size_t c = 0; c < cols; ++c) (*gin[1])[c] += g(r, c);
                                 });
}

Var matmul(Var a, Var b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k)
    throw ShapeError("matmul: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  Tensor y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* yr = &y(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const double s = av(i, p);
      const double* br = bv.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) yr[j] += s * br[j];
    }
  }
  return tape_of(a, b).record("matmul", std::move(y), {a, b}, [a, b, m, k, n](const Tensor& g, std::span<Tensor* const> gin) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (gin[0]) {
      Tensor& ga = *gin[0];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double* gr = g.data().data() + i * n;
          const double* br = bv.data().data() + p * n;
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += gr[j] * br[j];
          ga(i, p) += s;
        }
    }
    if (gin[1]) {
      Tensor& gb = *gin[1];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double s = av(i, p);
          double* gbr = &gb(p, 0);
          const double* gr = g.data().data() + i * n;
          for (std::size_t j = 0; j < n; ++j) gbr[j] += s * gr[j];
        }
    }
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->record("sum", Tensor::scalar(s), {a}, [](const Tensor& g, std::span<Tensor* const> gin) {
    const double gv = g[0];
    for (double& v : gin[0]->data()) v += gv;
  });
}

Var weighted_sum(Var a, const Tensor& w) {
  if (a.shape() != w.shape()) throw ShapeError("weighted_sum: weight shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += a.value()[i] * w[i];
  return a.tape->record("weighted_sum", Tensor::scalar(s), {a}, [w](const Tensor& g, std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < w.size(); ++i) (*gin[0])[i] += g[0] * w[i];
  });
}

Var sigmoid(Var a) {
  return unary("sigmoid", a, sigmoid_value, [](double x) {
    const double s = sigmoid_value(x);
    return s * (1.0 - s);
  });
}

Var swish(Var a) {
  return unary("swish", a, [](double x) { return x * sigmoid_value(x); },
               [](double x) {
                 const double s = sigmoid_value(x);
                 return s + x * s * (1.0 - s);
               });
}

Var positive_feature(Var a) {
  return unary("positive_feature", a, [](double x) { return 1.0 + softplus(x); }, sigmoid_value);
}

Var glu(Var a) {
  require_matrix("glu", a);
  const std::size_t rows = a.value().rows(), cols = a.value().cols();
  if (cols % 2) throw ShapeError("glu: odd channel count");
  const std::size_t half = cols / 2;
  const Tensor& x = a.value();
  Tensor y({rows, half});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < half; ++c) y(r, c) = x(r, c) * sigmoid_value(x(r, c + half));
  return a.tape->record("glu", std::move(y), {a}, [a, rows, half](const Tensor& g, std::span<Tensor* const> gin) {
    const Tensor& x = a.value();
    Tensor& gx = *gin[0];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < half; ++c) {
        const double s = sigmoid_value(x(r, c + half));
        gx(r, c) += g(r, c) * s;
        gx(r, c + half) += g(r, c) * x(r, c) * s * (1.0 - s);
      }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require_matrix("layer_norm", x);
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (gain.value().size() != cols || bias.value().size() != cols) throw ShapeError("layer_norm: parameter size mismatch");
  Tensor xhat({rows, cols});
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += xv(r, c);
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xv(r, c) - mean) * (xv(r, c) - mean);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) xhat(r, c) = (xv(r, c) - mean) * inv_std[r];
  }
  Tensor y({rows, cols});
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) y(r, c) = xhat(r, c) * gv[c] + bv[c];
  return x.tape->record(
      "layer_norm", std::move(y), {x, gain, bias},
      [gain, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, cols](const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& gv = gain.value();
        if (gin[1])
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) (*gin[1])[c] += g(r, c) * xhat(r, c);
        if (gin[2])
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) (*gin[2])[c] += g(r, c);
        if (!gin[0]) return;
        const double n = static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            const double gh = g(r, c) * gv[c];
            mean_g += gh;
            mean_gx += gh * xhat(r, c);
          }
          mean_g /= n;
          mean_gx /= n;
          for (std::size_t c = 0; c < cols; ++c)
            (*gin[0])(r, c) += inv_std[r] * (g(r, c) * gv[c] - mean_g - xhat(r, c) * mean_gx);
        }
      });
}

Var batch_norm(Var x, Var gain, Var bias, double eps) {
  require_matrix("batch_norm", x);
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (gain.value().size() != cols || bias.value().size() != cols) throw ShapeError("batch_norm: parameter size mismatch");
  Tensor xhat({rows, cols});
  std::vector<double> inv_std(cols);
  for (std::size_t c = 0; c < cols; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < rows; ++r) mean += xv(r, c);
    mean /= static_cast<double>(rows);
    double var = 0.0;
    for (std::size_t r = 0; r < rows; ++r) var += (xv(r, c) - mean) * (xv(r, c) - mean);
    var /= static_cast<double>(rows);
    inv_std[c] = 1.0 / std::sqrt(var + eps);
    for (std::size_t r = 0; r < rows; ++r) xhat(r, c) = (xv(r, c) - mean) * inv_std[c];
  }
  Tensor y({rows, cols});
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) y(r, c) = xhat(r, c) * gv[c] + bv[c];
  return x.tape->record(
      "batch_norm", std::move(y), {x, gain, bias},
      [gain, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, cols](const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& gv = gain.value();
        if (gin[1])
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) (*gin[1])[c] += g(r, c) * xhat(r, c);
        if (gin[2])
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) (*gin[2])[c] += g(r, c);
        if (!gin[0]) return;
        const double n = static_cast<double>(rows);
        for (std::size_t c = 0; c < cols; ++c) {
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::size_t r = 0; r < rows; ++r) {
            mean_g += g(r, c);
            mean_gx += g(r, c) * xhat(r, c);
          }
          mean_g /= n;
          mean_gx /= n;
          for (std::size_t r = 0; r < rows; ++r)
            (*gin[0])(r, c) += gv[c] * inv_std[c] * (g(r, c) - mean_g - xhat(r, c) * mean_gx);
        }
      });
}

Var batch_norm_fixed(Var x, const Tensor& mean, const Tensor& var, Var gain, Var bias, double eps) {
  require_matrix("batch_norm_fixed", x);
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (mean.size() != cols || var.size() != cols || gain.value().size() != cols || bias.value().size() != cols)
    throw ShapeError("batch_norm_fixed: parameter size mismatch");
  std::vector<double> inv_std(cols);
  for (std::size_t c = 0; c < cols; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  Tensor y({rows, cols});
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) y(r, c) = (xv(r, c) - mean[c]) * inv_std[c] * gv[c] + bv[c];
  return x.tape->record("batch_norm_fixed", std::move(y), {x, gain, bias},
                        [x, gain, mean, inv_std, rows, cols](const Tensor& g, std::span<Tensor* const> gin) {
                          const Tensor& xv = x.value();
                          const Tensor& gv = gain.value();
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < cols; ++c) {
                              const double xh = (xv(r, c) - mean[c]) * inv_std[c];
                              if (gin[0]) (*gin[0])(r, c) += g(r, c) * gv[c] * inv_std[c];
                              if (gin[1]) (*gin[1])[c] += g(r, c) * xh;
                              if (gin[2]) (*gin[2])[c] += g(r, c);
                            }
                        });
}

Var unfold_time(Var x, std::size_t width, std::size_t stride, std::size_t pad_left, std::size_t pad_right) {
  require_matrix("unfold_time", x);
  const Tensor& xv = x.value();
  const std::size_t T = xv.rows(), C = xv.cols();
  if (width == 0 || stride == 0) throw ShapeError("unfold_time: zero width or stride");
  if (T + pad_left + pad_right < width) throw ShapeError("unfold_time: input shorter than window");
  const std::size_t out_rows = (T + pad_left + pad_right - width) / stride + 1;
  Tensor y({out_rows, width * C});
  auto source = [=](std::size_t r, std::size_t m) -> long {
    return static_cast<long>(r * stride + m) - static_cast<long>(pad_left);
  };
  for (std::size_t r = 0; r < out_rows; ++r)
    for (std::size_t m = 0; m < width; ++m) {
      const long t = source(r, m);
      if (t < 0 || t >= static_cast<long>(T)) continue;
      for (std::size_t c = 0; c < C; ++c) y(r, m * C + c) = xv(static_cast<std::size_t>(t), c);
    }
  return x.tape->record("unfold_time", std::move(y), {x},
                        [=](const Tensor& g, std::span<Tensor* const> gin) {
                          Tensor& gx = *gin[0];
                          for (std::size_t r = 0; r < out_rows; ++r)
                            for (std::size_t m = 0; m < width; ++m) {
                              const long t = source(r, m);
                              if (t < 0 || t >= static_cast<long>(T)) continue;
                              for (std::size_t c = 0; c < C; ++c) gx(static_cast<std::size_t>(t), c) += g(r, m * C + c);
                            }
                        });
}

Var depthwise_conv(Var x, Var weight, Var bias, std::size_t pad_left) {
  require_matrix("depthwise_conv", x);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const std::size_t T = xv.rows(), C = xv.cols();
  if (wv.rank() != 2 || wv.rows() != C) throw ShapeError("depthwise_conv: weight must be [channels x width]");
  if (bias.value().size() != C) throw ShapeError("depthwise_conv: bias size mismatch");
  const std::size_t W = wv.cols();
  if (pad_left >= W) throw ShapeError("depthwise_conv: pad_left must be smaller than the width");
  Tensor y({T, C});
  const Tensor& bv = bias.value();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) {
      double s = bv[c];
      for (std::size_t m = 0; m < W; ++m) {
        const long src = static_cast<long>(t + m) - static_cast<long>(pad_left);
        if (src < 0 || src >= static_cast<long>(T)) continue;
        s += wv(c, m) * xv(static_cast<std::size_t>(src), c);
      }
      y(t, c) = s;
    }
  return x.tape->record("depthwise_conv", std::move(y), {x, weight, bias},
                        [x, weight, T, C, W, pad_left](const Tensor& g, std::span<Tensor* const> gin) {
                          const Tensor& xv = x.value();
                          const Tensor& wv = weight.value();
                          for (std::size_t t = 0; t < T; ++t)
                            for (std::size_t c = 0; c < C; ++c) {
                              const double gt = g(t, c);
                              if (gin[2]) (*gin[2])[c] += gt;
                              for (std::size_t m = 0; m < W; ++m) {
                                const long src = static_cast<long>(t + m) - static_cast<long>(pad_left);
                                if (src < 0 || src >= static_cast<long>(T)) continue;
                                const auto s = static_cast<std::size_t>(src);
                                if (gin[0]) (*gin[0])(s, c) += gt * wv(c, m);
                                if (gin[1]) (*gin[1])(c, m) += gt * xv(s, c);
                              }
                            }
                        });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  require_matrix("slice_cols", x);
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (begin > end || end > cols) throw ShapeError("slice_cols: range out of bounds");
  const std::size_t w = end - begin;
  Tensor y({rows, w});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) y(r, c) = xv(r, begin + c);
  return x.tape->record("slice_cols", std::move(y), {x}, [rows, w, begin](const Tensor& g, std::span<Tensor* const> gin) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) (*gin[0])(r, begin + c) += g(r, c);
  });
}

Var concat_cols(Var a, Var b) {
  require_matrix("concat_cols", a);
  require_matrix("concat_cols", b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rows() != bv.rows()) throw ShapeError("concat_cols: row count mismatch");
  const std::size_t rows = av.rows(), ca = av.cols(), cb = bv.cols();
  Tensor y({rows, ca + cb});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < ca; ++c) y(r, c) = av(r, c);
    for (std::size_t c = 0; c < cb; ++c) y(r, ca + c) = bv(r, c);
  }
  return tape_of(a, b).record("concat_cols", std::move(y), {a, b}, [rows, ca, cb](const Tensor& g, std::span<Tensor* const> gin) {
    for (std::size_t r = 0; r < rows; ++r) {
      if (gin[0])
        for (std::size_t c = 0; c < ca; ++c) (*gin[0])(r, c) += g(r, c);
      if (gin[1])
        for (std::size_t c = 0; c < cb; ++c) (*gin[1])(r, c) += g(r, ca + c);
    }
  });
}

Var dropout(Var x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be below 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  Tensor mask(x.shape());
  for (double& m : mask.data()) m = keep(rng) ? s : 0.0;
  Tensor y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
  return x.tape->record("dropout", std::move(y), {x}, [mask = std::move(mask)](const Tensor& g, std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * mask[i];
  });
}

Var cumsum(Var x, std::size_t axis) {
  Tensor y = ch4::cumsum(x.value(), axis);
  const Shape shape = x.shape();
  return x.tape->record("cumsum", std::move(y), {x}, [shape, axis](const Tensor& g, std::span<Tensor* const> gin) {
    // Reverse prefix sums: dL/dx_i = sum_{j>=i} g_j along the axis.
    const std::size_t n = shape[axis];
    std::size_t inner = 1;
    for (std::size_t a = axis + 1; a < shape.size(); ++a) inner *= shape[a];
    const std::size_t outer = g.size() / std::max<std::size_t>(1, n * inner);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < inner; ++k) {
        double acc = 0.0;
        for (std::size_t i = n; i-- > 0;) {
          const std::size_t at = (o * n + i) * inner + k;
          acc += g[at];
          (*gin[0])[at] += acc;
        }
      }
  });
}

}  // namespace ch4::ops
