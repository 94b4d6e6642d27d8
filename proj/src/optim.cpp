#include "mxa/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mxa::train {

bool adamw_step(std::span<const Tensor> params, AdamWState& state, double lr, double weight_decay,
                const AdamWOptions& opts) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].numel(), 0.0);
      state.v[i].assign(params[i].numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adamw_step: parameter count changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel())
      throw std::invalid_argument("adamw_step: parameter " + std::to_string(i) + " changed size");
    for (double g : params[i].grad())
      if (!std::isfinite(g)) {
        ++state.rejected;
        return false;
      }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(opts.beta1, t);
  const double bc2 = 1.0 - std::pow(opts.beta2, t);
  const double decay = 1.0 - lr * weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = Tensor(params[i]).mutable_values();
    const auto g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = opts.beta1 * m[k] + (1.0 - opts.beta1) * g[k];
      v[k] = opts.beta2 * v[k] + (1.0 - opts.beta2) * g[k] * g[k];
      p[k] *= decay;
      p[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + opts.eps);
    }
  }
  return true;
}

double cosine_lr(double epoch, const Schedule& s) {
  if (epoch < s.warmup_epochs) return s.lr_max * (epoch / s.warmup_epochs);
  const double end = s.total_epochs - s.cooldown_epochs;
  const double span = end - s.warmup_epochs;
  if (epoch >= end) return s.lr_min;
  if (epoch <= s.warmup_epochs) return s.lr_max;
  const double t = (epoch - s.warmup_epochs) / span;
  return s.lr_min + (s.lr_max - s.lr_min) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

double global_grad_norm(std::span<const Tensor> params) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) sq += g * g;
  return std::sqrt(sq);
}

ClipResult clip_gradients(std::span<const Tensor> params, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_gradients: max_norm must be positive");
  ClipResult r;
  r.norm_before = global_grad_norm(params);
  if (r.norm_before > max_norm) {
    const double factor = max_norm / r.norm_before;
    for (const auto& p : params)
      for (double& g : p.mutable_grad()) g *= factor;
    r.applied = true;
  }
  return r;
}

void ema_update(std::span<const Tensor> shadow, std::span<const Tensor> params, double decay) {
  if (shadow.size() != params.size()) throw std::invalid_argument("ema_update: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (shadow[i].shape() != params[i].shape())
      throw std::invalid_argument("ema_update: shape mismatch at parameter " + std::to_string(i));
    auto s = Tensor(shadow[i]).mutable_values();
    const auto p = params[i].values();
    // lerp is exact at both ends and stays between its endpoints.
    for (std::size_t k = 0; k < s.size(); ++k) s[k] = std::lerp(s[k], p[k], 1.0 - decay);
  }
}

}  // namespace mxa::train
