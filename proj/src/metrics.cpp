#include "mxa/metrics.hpp"

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>

namespace mxa::train {

std::optional<double> roc_auc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument("roc_auc: " + std::to_string(scores.size()) + " scores vs " +
                                std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = scores.size();
  std::uint64_t pos = 0;
  for (double y : labels) {
    if (y != 0.0 && y != 1.0) throw std::invalid_argument("roc_auc: labels must be 0 or 1");
    pos += y == 1.0;
  }
  const std::uint64_t neg = n - pos;
  if (pos == 0 || neg == 0) return std::nullopt;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Twice the 1-based midrank of a tie group [lo, hi) is lo + hi + 1, an
  // integer, so the statistic is exact.
  std::uint64_t rank_sum_x2 = 0;
  for (std::size_t lo = 0; lo < n;) {
    std::size_t hi = lo + 1;
    while (hi < n && scores[order[hi]] == scores[order[lo]]) ++hi;
    std::uint64_t group_pos = 0;
    for (std::size_t k = lo; k < hi; ++k) group_pos += labels[order[k]] == 1.0;
    rank_sum_x2 += group_pos * (lo + hi + 1);
    lo = hi;
  }
  const std::uint64_t u_x2 = rank_sum_x2 - pos * (pos + 1);
  return static_cast<double>(u_x2) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

ThresholdMetrics threshold_metrics(const Tensor& probs, const Tensor& labels, double threshold) {
  if (probs.rank() != 2 || probs.shape() != labels.shape())
    throw std::invalid_argument("threshold_metrics: expected matching [N, L] tensors");
  const std::size_t N = probs.dim(0), L = probs.dim(1);
  const auto p = probs.values();
  const auto y = labels.values();
  ThresholdMetrics r;
  r.accuracy.assign(L, 0.0);
  r.f1.assign(L, 0.0);
  std::size_t correct_total = 0;
  for (std::size_t j = 0; j < L; ++j) {
    std::size_t tp = 0, fp = 0, fn = 0, correct = 0;
    for (std::size_t i = 0; i < N; ++i) {
      const bool pred = p[i * L + j] >= threshold;
      const bool truth = y[i * L + j] == 1.0;
      correct += pred == truth;
      tp += pred && truth;
      fp += pred && !truth;
      fn += !pred && truth;
    }
    correct_total += correct;
    r.accuracy[j] = N ? static_cast<double>(correct) / static_cast<double>(N) : 0.0;
    const double precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    r.f1[j] = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  }
  if (L) {
    r.accuracy_macro = std::accumulate(r.accuracy.begin(), r.accuracy.end(), 0.0) / static_cast<double>(L);
    r.f1_macro = std::accumulate(r.f1.begin(), r.f1.end(), 0.0) / static_cast<double>(L);
  }
  if (N > 0 && L > 0) r.accuracy_micro = static_cast<double>(correct_total) / static_cast<double>(N * L);
  return r;
}

MetricsReport evaluate_predictions(const Tensor& probs, const Tensor& labels, double loss) {
  const auto tm = threshold_metrics(probs, labels);
  const std::size_t N = probs.dim(0), L = probs.dim(1);
  MetricsReport r;
  r.loss = loss;
  r.acc_per_label = tm.accuracy;
  r.acc_macro = tm.accuracy_macro;
  r.acc_micro = tm.accuracy_micro;
  r.f1_macro = tm.f1_macro;

  const auto p = probs.values();
  const auto y = labels.values();
  std::vector<double> col_p(N), col_y(N);
  double sum = 0.0;
  std::size_t defined = 0;
  for (std::size_t j = 0; j < L; ++j) {
    for (std::size_t i = 0; i < N; ++i) {
      col_p[i] = p[i * L + j];
      col_y[i] = y[i * L + j];
    }
    auto auc = roc_auc(col_p, col_y);
    if (auc) {
      sum += *auc;
      ++defined;
    }
    r.auc_per_label.push_back(auc);
  }
  if (defined) r.auc_macro = sum / static_cast<double>(defined);
  r.auc_micro = roc_auc(p, y);
  return r;
}

nlohmann::json MetricsReport::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json per = nlohmann::json::array();
  for (const auto& a : auc_per_label) per.push_back(opt(a));
  return {{"loss", loss},         {"auc_macro", opt(auc_macro)}, {"auc_micro", opt(auc_micro)},
          {"auc_per_label", per}, {"acc", acc_macro},            {"acc_micro", acc_micro},
          {"f1", f1_macro}};
}

}  // namespace mxa::train
