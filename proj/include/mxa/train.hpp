#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "json.hpp"
#include "mxa/data.hpp"
#include "mxa/distill.hpp"
#include "mxa/metrics.hpp"
#include "mxa/model.hpp"
#include "mxa/optim.hpp"

namespace mxa::train {

// Desk-scale defaults; full_scale_profile() holds the full-scale values.
struct TrainConfig {
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  double warmup_epochs = 3;
  double cooldown_epochs = 0;
  std::size_t total_epochs = 30;
  double weight_decay = 0.025;
  double clip_norm = 0.02;
  double ema_decay = 0.995;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  kd::LossConfig loss{0.0, 1.0};
  // Stops early after this many optimizer steps (accepted or rejected).
  std::optional<std::size_t> max_steps;

  void validate() const;
  Schedule schedule() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys are errors. Loss keys
  // "alpha" and "tau" are read from `loss` when given.
  static TrainConfig from_json(const nlohmann::json& train, const nlohmann::json& loss = nlohmann::json::object());
};

// A run config file: {"model": {...}, "train": {...}, "loss": {"alpha", "tau"}}.
// Every section is optional; unknown keys anywhere are errors.
struct RunConfig {
  model::ModelConfig model;
  TrainConfig train;

  nlohmann::json to_json() const;  // every default materialized
  static RunConfig from_json(const nlohmann::json& j);
};

// 50 epochs: 5 warm-up, 10 cool-down, EMA 0.99996, batch 64, alpha 0.5.
TrainConfig full_scale_profile();

struct TrainData {
  const data::Dataset* train = nullptr;
  const data::Dataset* val = nullptr;  // optional
  Tensor teacher_logits;               // [N_train, 18] aligned to train ids; required when alpha > 0
  kd::TeacherAdapterSpec adapter = kd::TeacherAdapterSpec::chex_default();
};

struct TrainResult {
  model::Model model;
  std::vector<Tensor> ema;  // aligned with model.parameters()
  std::vector<nlohmann::json> log;
  std::size_t steps = 0;
  std::size_t rejected_steps = 0;

  // Copy of `model` carrying the EMA weights.
  model::Model ema_model() const;
};

struct TrainHooks {
  std::function<void(const nlohmann::json&)> on_epoch;
};

// One JSON object per epoch: epoch, lr, loss (mean training loss), steps,
// rejected_steps and, with a validation set, the EMA-weight metrics at top
// level plus the raw-weight metrics under "raw".
// Throws NumericError naming the epoch, batch and sample ids on a non-finite loss.
TrainResult train(const model::ModelConfig& model_cfg, const TrainData& data, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

// Metrics against U-1 targets; `loss` is the mean BCE.
MetricsReport evaluate(const model::Model& model, const data::Dataset& ds, std::size_t batch_size = 32);
// Sigmoid outputs [N, 14].
Tensor predict(const model::Model& model, const data::Dataset& ds, std::size_t batch_size = 32);

}  // namespace mxa::train
