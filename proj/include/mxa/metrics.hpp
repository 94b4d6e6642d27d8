#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "mxa/tensor.hpp"

namespace mxa::train {

// Mann-Whitney AUC from midranks: P(s+ > s-) + P(tie)/2. Empty when either
// class is absent. Labels must be 0 or 1.
std::optional<double> roc_auc(std::span<const double> scores, std::span<const double> labels);

struct ThresholdMetrics {
  std::vector<double> accuracy;  // per label
  std::vector<double> f1;        // per label, 0 when precision + recall == 0
  double accuracy_macro = 0.0;
  double accuracy_micro = 0.0;   // pooled over (sample, label) pairs
  double f1_macro = 0.0;
};

// probs, labels: [N, L]. A score equal to the threshold predicts positive.
ThresholdMetrics threshold_metrics(const Tensor& probs, const Tensor& labels, double threshold = 0.5);

struct MetricsReport {
  std::vector<std::optional<double>> auc_per_label;
  std::optional<double> auc_macro;  // mean over defined labels
  std::optional<double> auc_micro;
  std::vector<double> acc_per_label;
  double acc_macro = 0.0;
  double acc_micro = 0.0;
  double f1_macro = 0.0;
  double loss = 0.0;

  nlohmann::json to_json() const;
};

// probs and binary targets [N, L]; `loss` is copied into the report.
MetricsReport evaluate_predictions(const Tensor& probs, const Tensor& labels, double loss);

}  // namespace mxa::train
