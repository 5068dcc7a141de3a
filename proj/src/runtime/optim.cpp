#include "ch4/runtime/optim.hpp"

#include <cmath>
#include <numbers>

#include "ch4/error.hpp"

namespace ch4 {

double learning_rate(const OptimizerConfig& cfg, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) throw ConfigError("learning_rate: no steps");
  step = std::min(step, total_steps - 1);
  const auto warmup = static_cast<std::size_t>(std::ceil(cfg.warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) return cfg.max_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const std::size_t span = total_steps - warmup;
  if (span <= 1) return cfg.max_lr;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(span - 1);
  return cfg.max_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<NamedParam> trainable_parameters(Encoder& encoder) {
  std::vector<NamedParam> out;
  encoder.visit([&](const std::string& name, Tensor& t, bool trainable) {
    if (trainable) out.push_back({name, &t});
  });
  return out;
}

double clip_gradients(const std::vector<NamedParam>& params, GradStore& grads, double max_norm) {
  double sq = 0.0;
  for (const NamedParam& p : params) {
    const auto it = grads.find(p.tensor);
    if (it != grads.end())
      for (double v : it->second.data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (max_norm > 0.0 && norm > max_norm)
    for (auto& [_, g] : grads) g *= max_norm / norm;
  return norm;
}

void AdamW::step(const std::vector<NamedParam>& params, const GradStore& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const NamedParam& p : params) {
    Tensor& w = *p.tensor;
    const auto it = grads.find(p.tensor);
    const Tensor* g = it == grads.end() || it->second.empty() ? nullptr : &it->second;
    if (g && g->shape() != w.shape()) throw ShapeError("AdamW: gradient shape mismatch for " + p.name);
    Tensor& m = m_.try_emplace(p.name, Tensor::zeros_like(w)).first->second;
    Tensor& v = v_.try_emplace(p.name, Tensor::zeros_like(w)).first->second;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      w[i] -= lr * (update + cfg_.weight_decay * w[i]);
    }
  }
}

}  // namespace ch4
