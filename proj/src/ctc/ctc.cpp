#include "ch4/ctc/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ch4/error.hpp"

namespace ch4 {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace

std::size_t min_ctc_frames(const Labels& labels) {
  std::size_t n = labels.size();
  for (std::size_t i = 1; i < labels.size(); ++i) n += labels[i] == labels[i - 1];
  return n;
}

namespace ops {

Var ctc_loss(Var logits, const Labels& labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || z.cols() < 2) throw ShapeError("ctc_loss: logits must be [T x (V+1)] with V >= 1");
  const std::size_t T = z.rows(), K = z.cols();
  for (std::uint32_t l : labels)
    if (l == kBlank || l >= K)
      throw ShapeError("ctc_loss: label " + std::to_string(l) + " outside [1, " + std::to_string(K - 1) + "]");
  if (T < min_ctc_frames(labels))
    throw AlignmentError("ctc_loss: " + std::to_string(labels.size()) + " labels need at least " +
                         std::to_string(min_ctc_frames(labels)) + " frames, got " + std::to_string(T));

  Tensor logp({T, K});
  for (std::size_t t = 0; t < T; ++t) {
    double m = kNegInf;
    for (std::size_t k = 0; k < K; ++k) m = std::max(m, z(t, k));
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(z(t, k) - m);
    const double lse = m + std::log(s);
    for (std::size_t k = 0; k < K; ++k) logp(t, k) = z(t, k) - lse;
  }

  // Blank-interleaved label string: b l1 b l2 ... lU b.
  const std::size_t S = 2 * labels.size() + 1;
  auto sym = [&](std::size_t s) { return s % 2 ? labels[s / 2] : kBlank; };
  auto can_skip = [&](std::size_t s) { return s >= 2 && s % 2 && sym(s) != sym(s - 2); };

  std::vector<double> alpha(T * S, kNegInf), beta(T * S, kNegInf);
  alpha[0] = logp(0, kBlank);
  if (S > 1) alpha[1] = logp(0, sym(1));
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      double a = alpha[(t - 1) * S + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * S + s - 1]);
      if (can_skip(s)) a = log_add(a, alpha[(t - 1) * S + s - 2]);
      alpha[t * S + s] = a == kNegInf ? kNegInf : a + logp(t, sym(s));
    }
  beta[(T - 1) * S + S - 1] = logp(T - 1, kBlank);
  if (S > 1) beta[(T - 1) * S + S - 2] = logp(T - 1, sym(S - 2));
  for (std::size_t t = T - 1; t-- > 0;)
    for (std::size_t s = 0; s < S; ++s) {
      double b = beta[(t + 1) * S + s];
      if (s + 1 < S) b = log_add(b, beta[(t + 1) * S + s + 1]);
      if (s + 2 < S && can_skip(s + 2)) b = log_add(b, beta[(t + 1) * S + s + 2]);
      beta[t * S + s] = b == kNegInf ? kNegInf : b + logp(t, sym(s));
    }

  double log_total = alpha[(T - 1) * S + S - 1];
  if (S > 1) log_total = log_add(log_total, alpha[(T - 1) * S + S - 2]);
  if (!std::isfinite(log_total)) throw NumericError("ctc_loss: alignment probability underflowed");

  // d loss / d z[t,k] = p[t,k] - sum_{s: sym(s)=k} alpha beta / (P p[t,k]).
  Tensor grad({T, K});
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> occ(K, kNegInf);
    for (std::size_t s = 0; s < S; ++s) {
      const double ab = alpha[t * S + s] + beta[t * S + s];
      if (ab != kNegInf) occ[sym(s)] = log_add(occ[sym(s)], ab);
    }
    for (std::size_t k = 0; k < K; ++k) {
      const double p = std::exp(logp(t, k));
      const double gamma = occ[k] == kNegInf ? 0.0 : std::exp(occ[k] - log_total - logp(t, k));
      grad(t, k) = p - gamma;
    }
  }

  return logits.tape->record("ctc_loss", Tensor::scalar(-log_total), {logits},
                             [grad = std::move(grad)](const Tensor& g, std::span<Tensor* const> gin) {
                               const double s = g.item();
                               for (std::size_t i = 0; i < grad.size(); ++i) (*gin[0])[i] += s * grad[i];
                             });
}

}  // namespace ops

double ctc_loss(const Tensor& logits, const Labels& labels) {
  Tape tape(false);
  return ops::ctc_loss(tape.constant(logits), labels).value().item();
}

Labels ctc_greedy_decode(const Tensor& logits) {
  Labels out;
  std::uint32_t prev = kBlank;
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    std::uint32_t best = 0;
    for (std::size_t k = 1; k < logits.cols(); ++k)
      if (logits(t, k) > logits(t, best)) best = static_cast<std::uint32_t>(k);
    if (best != kBlank && best != prev) out.push_back(best);
    prev = best;
  }
  return out;
}

std::size_t edit_distance(const Labels& hyp, const Labels& ref) {
  std::vector<std::size_t> row(ref.size() + 1);
  for (std::size_t j = 0; j <= ref.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= hyp.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= ref.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (hyp[i - 1] != ref[j - 1])});
      diag = up;
    }
  }
  return row[ref.size()];
}

double token_error_rate(const Labels& hyp, const Labels& ref) {
  return static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(std::max<std::size_t>(1, ref.size()));
}

}  // namespace ch4
