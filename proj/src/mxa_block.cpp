#include "mxa/mxa_block.hpp"

#include <cmath>
#include <iomanip>
#include <stdexcept>

#include "mxa/init.hpp"
#include "mxa/ops.hpp"

namespace mxa::nn {

bool RoiBox::valid() const {
  return 0.0 <= x1 && x1 < x2 && x2 <= 1.0 && 0.0 <= y1 && y1 < y2 && y2 <= 1.0 && x2 - x1 >= kMinRoiSize &&
         y2 - y1 >= kMinRoiSize;
}

std::vector<RoiBox> boxes_from_tensor(const Tensor& boxes) {
  if (boxes.rank() != 2 || boxes.dim(1) != 4) {
    throw std::invalid_argument("boxes_from_tensor: expected [B,4], got " + shape_str(boxes.shape()));
  }
  std::vector<RoiBox> out(boxes.dim(0));
  const auto v = boxes.values();
  for (std::size_t b = 0; b < out.size(); ++b) out[b] = {v[b * 4], v[b * 4 + 1], v[b * 4 + 2], v[b * 4 + 3]};
  return out;
}

RoiPredictorParams RoiPredictorParams::init(std::size_t channels, std::uint64_t seed, const std::string& prefix) {
  const std::size_t C = channels;
  RoiPredictorParams p;
  p.conv1_weight = uniform_parameter({C, C, 3, 3}, C * 9, seed, prefix + ".conv1.weight");
  p.conv1_bias = uniform_parameter({C}, C * 9, seed, prefix + ".conv1.bias");
  p.conv2_weight = uniform_parameter({C, C, 3, 3}, C * 9, seed, prefix + ".conv2.weight");
  p.conv2_bias = uniform_parameter({C}, C * 9, seed, prefix + ".conv2.bias");
  p.fc_weight = uniform_parameter({C, 4}, C, seed, prefix + ".fc.weight");
  p.fc_bias = uniform_parameter({4}, C, seed, prefix + ".fc.bias");
  return p;
}

CbamParams CbamParams::init(std::size_t channels, std::size_t reduction, std::uint64_t seed,
                            const std::string& prefix, std::size_t spatial_kernel_size) {
  if (reduction == 0 || channels % reduction != 0) {
    throw std::invalid_argument("cbam: channels " + std::to_string(channels) + " not divisible by reduction " +
                                std::to_string(reduction));
  }
  if (spatial_kernel_size % 2 == 0) throw std::invalid_argument("cbam: spatial kernel size must be odd");
  const std::size_t hidden = channels / reduction;
  const std::size_t k = spatial_kernel_size;
  CbamParams p;
  p.reduction = reduction;
  p.w1 = uniform_parameter({channels, hidden}, channels, seed, prefix + ".mlp.w1");
  p.w2 = uniform_parameter({hidden, channels}, hidden, seed, prefix + ".mlp.w2");
  p.spatial_kernel = uniform_parameter({1, 2, k, k}, 2 * k * k, seed, prefix + ".spatial.weight");
  return p;
}

void CbamParams::validate(std::size_t channels) const {
  if (reduction == 0 || channels % reduction != 0) {
    throw std::invalid_argument("cbam: channels " + std::to_string(channels) + " not divisible by reduction " +
                                std::to_string(reduction));
  }
  const std::size_t hidden = channels / reduction;
  if (w1.shape() != Shape{channels, hidden} || w2.shape() != Shape{hidden, channels}) {
    throw std::invalid_argument("cbam: mlp weights " + shape_str(w1.shape()) + ", " + shape_str(w2.shape()) +
                                " do not match " + std::to_string(channels) + " channels / r " +
                                std::to_string(reduction));
  }
  const auto& k = spatial_kernel.shape();
  if (k.size() != 4 || k[0] != 1 || k[1] != 2 || k[2] != k[3] || k[2] % 2 == 0) {
    throw std::invalid_argument("cbam: spatial kernel must be [1x2xkxk] with odd k, got " + shape_str(k));
  }
}

namespace {

struct AxisBox {
  double lo, hi;
  double dlo_dc, dlo_ds;  // partials of lo in (c, s); hi = lo + s
};

AxisBox axis_box(double c, double s) {
  AxisBox a{};
  const double start = c - 0.5 * s;
  const double top = 1.0 - s;
  if (start <= 0.0) {
    a.lo = 0.0;
    a.dlo_dc = 0.0;
    a.dlo_ds = 0.0;
  } else if (start >= top) {
    a.lo = top;
    a.dlo_dc = 0.0;
    a.dlo_ds = -1.0;
  } else {
    a.lo = start;
    a.dlo_dc = 1.0;
    a.dlo_ds = -0.5;
  }
  a.hi = std::min(a.lo + s, 1.0);
  // Rounding can leave the side a few ulps under the floor; widen downwards.
  while (a.hi - a.lo < kMinRoiSize && a.lo > 0.0) a.lo = std::max(0.0, std::nextafter(a.lo, 0.0));
  return a;
}

}  // namespace

Tensor box_from_raw(const Tensor& raw) {
  if (raw.rank() != 2 || raw.dim(1) != 4) {
    throw std::invalid_argument("box_from_raw: expected [B,4], got " + shape_str(raw.shape()));
  }
  const std::size_t B = raw.dim(0);
  const double span = 1.0 - kMinRoiSize;
  const auto r = raw.values();
  std::vector<double> out(B * 4);
  // Per image and axis: dlo/dt_c, dlo/dt_s, dhi/dt_c, dhi/dt_s.
  auto partials = std::make_shared<std::vector<double>>(B * 2 * 4);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t axis = 0; axis < 2; ++axis) {
      const double tc = r[b * 4 + axis], ts = r[b * 4 + 2 + axis];
      const double c = stable_sigmoid(tc);
      const double sig_s = stable_sigmoid(ts);
      const double s = kMinRoiSize + span * sig_s;
      const AxisBox a = axis_box(c, s);
      out[b * 4 + axis] = a.lo;
      out[b * 4 + 2 + axis] = a.hi;
      const double dc = c * (1.0 - c);
      const double ds = span * sig_s * (1.0 - sig_s);
      double* P = partials->data() + (b * 2 + axis) * 4;
      P[0] = a.dlo_dc * dc;
      P[1] = a.dlo_ds * ds;
      P[2] = a.dlo_dc * dc;
      P[3] = (a.dlo_ds + 1.0) * ds;
    }
  Tensor result(Shape{B, 4}, std::move(out));
  detail::record("box_from_raw", {raw}, result, [raw, result, partials, B]() {
    const auto g = result.grad();
    auto gr = raw.mutable_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t axis = 0; axis < 2; ++axis) {
        const double* P = partials->data() + (b * 2 + axis) * 4;
        const double glo = g[b * 4 + axis], ghi = g[b * 4 + 2 + axis];
        gr[b * 4 + axis] += glo * P[0] + ghi * P[2];
        gr[b * 4 + 2 + axis] += glo * P[1] + ghi * P[3];
      }
  });
  return result;
}

Tensor predict_roi(const Tensor& features, const RoiPredictorParams& params) {
  if (features.rank() != 4) {
    throw std::invalid_argument("predict_roi: expected [B,C,H,W], got " + shape_str(features.shape()));
  }
  const std::size_t B = features.dim(0), C = features.dim(1);
  Tensor h = relu(conv2d(features, params.conv1_weight, params.conv1_bias, 1, 1));
  h = relu(conv2d(h, params.conv2_weight, params.conv2_bias, 1, 1));
  Tensor pooled = reshape(pool(h, PoolKind::GlobalAvg), {B, C});
  return box_from_raw(linear(pooled, params.fc_weight, params.fc_bias));
}

Tensor roi_pool(const Tensor& features, const Tensor& boxes) {
  if (features.rank() != 4) {
    throw std::invalid_argument("roi_pool: expected [B,C,H,W], got " + shape_str(features.shape()));
  }
  return bilinear_crop_resize(features, boxes, features.dim(2), features.dim(3));
}

namespace {

Tensor shared_mlp(const Tensor& x, const CbamParams& p) { return linear(relu(linear(x, p.w1)), p.w2); }

}  // namespace

Tensor channel_attention(const Tensor& pooled, const CbamParams& params) {
  if (pooled.rank() != 4) {
    throw std::invalid_argument("channel_attention: expected [B,C,H,W], got " + shape_str(pooled.shape()));
  }
  const std::size_t B = pooled.dim(0), C = pooled.dim(1);
  params.validate(C);
  Tensor avg = reshape(pool(pooled, PoolKind::GlobalAvg), {B, C});
  Tensor mx = reshape(pool(pooled, PoolKind::GlobalMax), {B, C});
  return sigmoid(add(shared_mlp(avg, params), shared_mlp(mx, params)));
}

Tensor spatial_attention(const Tensor& gated, const CbamParams& params) {
  if (gated.rank() != 4) {
    throw std::invalid_argument("spatial_attention: expected [B,C,H,W], got " + shape_str(gated.shape()));
  }
  params.validate(gated.dim(1));
  const Tensor parts[] = {pool(gated, PoolKind::ChannelMax), pool(gated, PoolKind::ChannelAvg)};
  Tensor descriptor = concat(parts, 1);
  const std::size_t k = params.spatial_kernel.dim(2);
  return sigmoid(conv2d(descriptor, params.spatial_kernel, 1, k / 2));
}

Tensor mxa_forward(const Tensor& features, const RoiPredictorParams& roi, const CbamParams& cbam,
                   Tensor* boxes_out) {
  Tensor boxes = predict_roi(features, roi);
  if (boxes_out) *boxes_out = boxes;
  Tensor pooled = roi_pool(features, boxes);
  Tensor chan = mul(pooled, channel_attention(pooled, cbam));
  return mul(chan, spatial_attention(chan, cbam));
}

void write_roi_csv(std::ostream& out, const std::vector<std::string>& sample_ids, const Tensor& boxes,
                   bool header) {
  const auto rows = boxes_from_tensor(boxes);
  if (rows.size() != sample_ids.size()) {
    throw std::invalid_argument("write_roi_csv: " + std::to_string(sample_ids.size()) + " ids for " +
                                std::to_string(rows.size()) + " boxes");
  }
  if (header) out << "sample_id,x1,y1,x2,y2\n";
  const auto old = out.precision(9);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out << sample_ids[i] << ',' << r.x1 << ',' << r.y1 << ',' << r.x2 << ',' << r.y2 << '\n';
  }
  out.precision(old);
}

}  // namespace mxa::nn
