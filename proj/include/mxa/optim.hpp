#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mxa/tensor.hpp"

namespace mxa::train {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First and second moments per parameter, zero-initialized on first use.
struct AdamWState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;
  std::size_t rejected = 0;  // steps skipped because a gradient was not finite
};

// Decoupled weight decay (p *= 1 - lr*wd) followed by the bias-corrected Adam
// update. Returns false and leaves parameters and moments untouched when any
// gradient is NaN or infinite.
bool adamw_step(std::span<const Tensor> params, AdamWState& state, double lr, double weight_decay,
                const AdamWOptions& opts = {});

struct Schedule {
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  double warmup_epochs = 3;
  double total_epochs = 30;
  // Constant lr_min tail at the end of the run, carved out of total_epochs.
  double cooldown_epochs = 0;
};

// Linear warm-up 0 -> lr_max, cosine decay to lr_min at
// total_epochs - cooldown_epochs, then flat.
double cosine_lr(double epoch, const Schedule& s);

struct ClipResult {
  double norm_before = 0.0;
  bool applied = false;
};

// Global L2 norm over all gradients; scales every gradient by max_norm / norm
// when the norm exceeds max_norm.
ClipResult clip_gradients(std::span<const Tensor> params, double max_norm);
double global_grad_norm(std::span<const Tensor> params);

// shadow <- decay * shadow + (1 - decay) * param
void ema_update(std::span<const Tensor> shadow, std::span<const Tensor> params, double decay);

}  // namespace mxa::train
