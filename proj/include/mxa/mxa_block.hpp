#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "mxa/tensor.hpp"

namespace mxa::nn {

inline constexpr double kMinRoiSize = 0.1;

// Normalized corners, one box per image.
struct RoiBox {
  double x1 = 0.0, y1 = 0.0, x2 = 1.0, y2 = 1.0;

  bool valid() const;
};

std::vector<RoiBox> boxes_from_tensor(const Tensor& boxes);

// Two 3x3 conv + ReLU layers, global average pool, linear to the raw box
// outputs (t_cx, t_cy, t_w, t_h).
struct RoiPredictorParams {
  Tensor conv1_weight, conv1_bias;
  Tensor conv2_weight, conv2_bias;
  Tensor fc_weight, fc_bias;  // [C, 4], [4]

  static RoiPredictorParams init(std::size_t channels, std::uint64_t seed, const std::string& prefix);
};

struct CbamParams {
  Tensor w1;              // [C, C/r]
  Tensor w2;              // [C/r, C]
  Tensor spatial_kernel;  // [1, 2, k, k], k odd
  std::size_t reduction = 4;

  static CbamParams init(std::size_t channels, std::size_t reduction, std::uint64_t seed,
                         const std::string& prefix, std::size_t spatial_kernel_size = 7);
  // Throws unless the tensors agree with `channels` and `reduction`.
  void validate(std::size_t channels) const;
};

// raw [B, 4] -> boxes [B, 4] as (x1, y1, x2, y2).
//   c = sigmoid(t_c), s = eps + (1 - eps) * sigmoid(t_s)
//   x1 = clamp(c - s/2, 0, 1 - s), x2 = x1 + s
// so every raw value yields a box inside the unit square with side >= eps.
Tensor box_from_raw(const Tensor& raw);

Tensor predict_roi(const Tensor& features, const RoiPredictorParams& params);
Tensor roi_pool(const Tensor& features, const Tensor& boxes);

Tensor channel_attention(const Tensor& pooled, const CbamParams& params);  // [B, C]
Tensor spatial_attention(const Tensor& gated, const CbamParams& params);   // [B, 1, H, W]

// ROI prediction, ROI pooling, then channel and spatial gating. `boxes_out`
// receives the predicted boxes when given.
Tensor mxa_forward(const Tensor& features, const RoiPredictorParams& roi, const CbamParams& cbam,
                   Tensor* boxes_out = nullptr);

void write_roi_csv(std::ostream& out, const std::vector<std::string>& sample_ids, const Tensor& boxes,
                   bool header = true);

}  // namespace mxa::nn
