#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mxa/tensor.hpp"

namespace mxa {

// Scalar helpers shared by ops and losses. Both avoid exp of large positives.
double stable_sigmoid(double x);
double stable_softplus(double x);

// Elementwise ops. Operands must have equal shapes, or one side may be
//   - a single-element tensor (scalar broadcast),
//   - [B,C] or [B,C,1,1] against a [B,C,H,W] map (per-channel),
//   - [B,1,H,W] against a [B,C,H,W] map (per-location).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double constant);
Tensor scale(const Tensor& a, double factor);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor softplus(const Tensor& a);

// [.., M, K] x [.., K, N]. Leading dims must match, or `b` may be rank 2 and
// shared across every leading index of `a`.
Tensor matmul(const Tensor& a, const Tensor& b);

// x[.., K] * weight[K, N] + bias[N]. bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

// input [B, Cin, H, W], kernel [Cout, Cin, k, k], optional bias [Cout].
// Output size (H + 2p - k) / stride + 1 must divide exactly.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride,
              std::size_t padding);
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t stride, std::size_t padding);

enum class PoolKind { GlobalAvg, GlobalMax, ChannelAvg, ChannelMax, WindowAvg };

// Global kinds give [B, C, 1, 1], channel kinds [B, 1, H, W], WindowAvg a
// non-overlapping `window` x `window` average. Max routes its gradient to the
// first maximal element in row-major scan order.
Tensor pool(const Tensor& input, PoolKind kind, std::size_t window = 2);

// Samples an out_h x out_w grid from each box of `boxes` [B, 4] given as
// normalized (x1, y1, x2, y2). Box coordinates map to pixel coordinates with
// x * (W - 1), and the first and last samples sit on the box edges, so the
// full box at the input size reproduces the input exactly. Differentiable in
// both the input and the box coordinates.
Tensor bilinear_crop_resize(const Tensor& input, const Tensor& boxes, std::size_t out_h,
                            std::size_t out_w);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

// Row gather on a rank-2 tensor; a negative index produces a zero row.
Tensor gather_rows(const Tensor& x, std::span<const std::ptrdiff_t> rows);

// Softmax over the last axis.
Tensor softmax(const Tensor& x);

// True when every value (and, if requested, every gradient) is finite.
bool all_finite(const Tensor& x, bool include_grad = false);

}  // namespace mxa
