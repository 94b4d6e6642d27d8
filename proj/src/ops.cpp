#include "mxa/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "mxa/parallel.hpp"

namespace mxa {

namespace {

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

// Rank-4 view of a per-channel or per-location operand: [B,C] -> [B,C,1,1].
Shape as_rank4(const Shape& s) {
  if (s.size() == 2) return {s[0], s[1], 1, 1};
  return s;
}

bool broadcastable_into(const Shape& big, const Shape& small) {
  if (big == small) return true;
  if (shape_numel(small) == 1) return true;
  if (big.size() != 4) return false;
  const Shape s = as_rank4(small);
  if (s.size() != 4 || s[0] != big[0]) return false;
  const bool per_channel = s[1] == big[1] && s[2] == 1 && s[3] == 1;
  const bool per_location = s[1] == 1 && s[2] == big[2] && s[3] == big[3];
  return per_channel || per_location;
}

// Flat index of the broadcast operand for every output element. Empty when the
// operand already has the output's shape.
std::vector<std::size_t> broadcast_map(const Shape& out, const Shape& small) {
  if (out == small) return {};
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> map(n, 0);
  if (shape_numel(small) == 1) return map;
  const Shape s = as_rank4(small);
  const std::size_t C = out[1], H = out[2], W = out[3];
  const std::size_t sc = s[1], sh = s[2], sw = s[3];
  std::size_t i = 0;
  for (std::size_t b = 0; b < out[0]; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w, ++i) {
          const std::size_t cc = sc == 1 ? 0 : c;
          const std::size_t hh = sh == 1 ? 0 : h;
          const std::size_t ww = sw == 1 ? 0 : w;
          map[i] = ((b * sc + cc) * sh + hh) * sw + ww;
        }
  return map;
}

enum class BinaryKind { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  Shape out_shape;
  if (broadcastable_into(a.shape(), b.shape())) {
    out_shape = a.shape();
  } else if (broadcastable_into(b.shape(), a.shape())) {
    out_shape = b.shape();
  } else {
    shape_error(name, a.shape(), b.shape());
  }
  auto amap = std::make_shared<std::vector<std::size_t>>(broadcast_map(out_shape, a.shape()));
  auto bmap = std::make_shared<std::vector<std::size_t>>(broadcast_map(out_shape, b.shape()));
  const std::size_t n = shape_numel(out_shape);
  std::vector<double> out(n);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[amap->empty() ? i : (*amap)[i]];
    const double y = bv[bmap->empty() ? i : (*bmap)[i]];
    switch (kind) {
      case BinaryKind::Add: out[i] = x + y; break;
      case BinaryKind::Sub: out[i] = x - y; break;
      case BinaryKind::Mul: out[i] = x * y; break;
    }
  }
  Tensor result(out_shape, std::move(out));
  detail::record(name, {a, b}, result, [a, b, result, amap, bmap, kind]() mutable {
    const auto g = result.grad();
    const auto av = a.values();
    const auto bv = b.values();
    const bool ga_on = a.requires_grad();
    const bool gb_on = b.requires_grad();
    auto ga = ga_on ? a.mutable_grad() : std::span<double>{};
    auto gb = gb_on ? b.mutable_grad() : std::span<double>{};
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t ia = amap->empty() ? i : (*amap)[i];
      const std::size_t ib = bmap->empty() ? i : (*bmap)[i];
      switch (kind) {
        case BinaryKind::Add:
          if (ga_on) ga[ia] += g[i];
          if (gb_on) gb[ib] += g[i];
          break;
        case BinaryKind::Sub:
          if (ga_on) ga[ia] += g[i];
          if (gb_on) gb[ib] -= g[i];
          break;
        case BinaryKind::Mul:
          if (ga_on) ga[ia] += g[i] * bv[ib];
          if (gb_on) gb[ib] += g[i] * av[ia];
          break;
      }
    }
  });
  return result;
}

// Unary op from a value function and a derivative expressed through the input
// and output values.
template <typename F, typename D>
Tensor unary(const Tensor& a, const char* name, F f, D dfdx) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  Tensor result(a.shape(), std::move(out));
  detail::record(name, {a}, result, [a, result, dfdx]() mutable {
    const auto g = result.grad();
    const auto x = a.values();
    const auto y = result.values();
    auto ga = a.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
  });
  return result;
}

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> strides(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) strides[i - 1] = strides[i] * s[i];
  return strides;
}

void check_axis(const char* op, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for shape " + shape_str(x.shape()));
  }
}

// (outer, axis length, inner) split of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Mul, "mul"); }

Tensor add(const Tensor& a, double constant) {
  return unary(a, "add_const", [constant](double x) { return x + constant; },
               [](double, double) { return 1.0; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(a, "scale", [factor](double x) { return x * factor; },
               [factor](double, double) { return factor; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, "sigmoid", stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  // NaN passes through so that non-finite checks downstream still see it.
  return unary(a, "relu", [](double x) { return x > 0 || std::isnan(x) ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& a) {
  return unary(a, "softplus", stable_softplus, [](double x, double) { return stable_sigmoid(x); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) shape_error("matmul", a.shape(), b.shape());
  const std::size_t M = a.dim(a.rank() - 2), K = a.dim(a.rank() - 1);
  const std::size_t Kb = b.dim(b.rank() - 2), N = b.dim(b.rank() - 1);
  if (K != Kb) shape_error("matmul", a.shape(), b.shape());
  const bool shared_b = b.rank() == 2;
  if (!shared_b) {
    if (a.rank() != b.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      shape_error("matmul", a.shape(), b.shape());
    }
  }
  const std::size_t batch = a.numel() / (M * K);
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(M);
  out_shape.push_back(N);
  std::vector<double> out(batch * M * N, 0.0);
  const double* A = a.values().data();
  const double* B = b.values().data();
  parallel_for(batch, M * K * N, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t p = lo; p < hi; ++p) {
      const double* Ap = A + p * M * K;
      const double* Bp = B + (shared_b ? 0 : p * K * N);
      double* Cp = out.data() + p * M * N;
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          const double aik = Ap[i * K + k];
          const double* brow = Bp + k * N;
          double* crow = Cp + i * N;
          for (std::size_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
        }
    }
  });
  Tensor result(out_shape, std::move(out));
  detail::record("matmul", {a, b}, result, [a, b, result, M, K, N, batch, shared_b]() mutable {
    const double* G = result.grad().data();
    const double* A = a.values().data();
    const double* B = b.values().data();
    if (a.requires_grad()) {
      double* GA = a.mutable_grad().data();
      for (std::size_t p = 0; p < batch; ++p) {
        const double* Gp = G + p * M * N;
        const double* Bp = B + (shared_b ? 0 : p * K * N);
        double* GAp = GA + p * M * K;
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t k = 0; k < K; ++k) {
            double acc = 0.0;
            const double* grow = Gp + i * N;
            const double* brow = Bp + k * N;
            for (std::size_t j = 0; j < N; ++j) acc += grow[j] * brow[j];
            GAp[i * K + k] += acc;
          }
      }
    }
    if (b.requires_grad()) {
      double* GB = b.mutable_grad().data();
      for (std::size_t p = 0; p < batch; ++p) {
        const double* Gp = G + p * M * N;
        const double* Ap = A + p * M * K;
        double* GBp = GB + (shared_b ? 0 : p * K * N);
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t k = 0; k < K; ++k) {
            const double aik = Ap[i * K + k];
            const double* grow = Gp + i * N;
            double* gbrow = GBp + k * N;
            for (std::size_t j = 0; j < N; ++j) gbrow[j] += aik * grow[j];
          }
      }
    }
  });
  return result;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(x.rank() - 1) != weight.dim(0)) {
    shape_error("linear", x.shape(), weight.shape());
  }
  const std::size_t K = weight.dim(0), N = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != N)) {
    shape_error("linear bias", weight.shape(), bias.shape());
  }
  const std::size_t rows = x.numel() / K;
  Shape out_shape = x.shape();
  out_shape.back() = N;
  std::vector<double> out(rows * N, 0.0);
  const double* X = x.values().data();
  const double* Wt = weight.values().data();
  const double* Bs = bias.defined() ? bias.values().data() : nullptr;
  parallel_for(rows, K * N, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t r = lo; r < hi; ++r) {
      double* orow = out.data() + r * N;
      if (Bs) std::copy(Bs, Bs + N, orow);
      const double* xrow = X + r * K;
      for (std::size_t k = 0; k < K; ++k) {
        const double xk = xrow[k];
        const double* wrow = Wt + k * N;
        for (std::size_t j = 0; j < N; ++j) orow[j] += xk * wrow[j];
      }
    }
  });
  Tensor result(out_shape, std::move(out));
  detail::record("linear", {x, weight, bias}, result, [x, weight, bias, result, rows, K, N]() mutable {
    const double* G = result.grad().data();
    if (x.requires_grad()) {
      double* GX = x.mutable_grad().data();
      const double* Wt = weight.values().data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < K; ++k) {
          double acc = 0.0;
          const double* grow = G + r * N;
          const double* wrow = Wt + k * N;
          for (std::size_t j = 0; j < N; ++j) acc += grow[j] * wrow[j];
          GX[r * K + k] += acc;
        }
    }
    if (weight.requires_grad()) {
      double* GW = weight.mutable_grad().data();
      const double* X = x.values().data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < K; ++k) {
          const double xk = X[r * K + k];
          const double* grow = G + r * N;
          double* gwrow = GW + k * N;
          for (std::size_t j = 0; j < N; ++j) gwrow[j] += xk * grow[j];
        }
    }
    if (bias.defined() && bias.requires_grad()) {
      double* GB = bias.mutable_grad().data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < N; ++j) GB[j] += G[r * N + j];
    }
  });
  return result;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  return conv2d(input, kernel, Tensor{}, stride, padding);
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  if (input.rank() != 4 || kernel.rank() != 4 || kernel.dim(1) != input.dim(1) ||
      kernel.dim(2) != kernel.dim(3)) {
    shape_error("conv2d", input.shape(), kernel.shape());
  }
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const std::size_t B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Cout = kernel.dim(0), k = kernel.dim(2);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout)) {
    shape_error("conv2d bias", kernel.shape(), bias.shape());
  }
  if (H + 2 * padding < k || W + 2 * padding < k || (H + 2 * padding - k) % stride != 0 ||
      (W + 2 * padding - k) % stride != 0) {
    throw std::invalid_argument("conv2d: non-integral output size for input " + shape_str(input.shape()) +
                                ", kernel " + std::to_string(k) + ", stride " + std::to_string(stride) +
                                ", padding " + std::to_string(padding));
  }
  const std::size_t Ho = (H + 2 * padding - k) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - k) / stride + 1;
  const auto pad = static_cast<std::ptrdiff_t>(padding);

  // Valid output range [lo, hi) along one axis for kernel tap t.
  auto valid_range = [stride, pad](std::size_t t, std::size_t in_len, std::size_t out_len) {
    std::size_t lo = 0, hi = out_len;
    // need 0 <= o*stride + t - pad < in_len
    const auto tt = static_cast<std::ptrdiff_t>(t);
    const auto s = static_cast<std::ptrdiff_t>(stride);
    if (tt < pad) lo = static_cast<std::size_t>((pad - tt + s - 1) / s);
    const std::ptrdiff_t limit = static_cast<std::ptrdiff_t>(in_len) + pad - tt;  // o*s < limit
    const std::ptrdiff_t max_o = limit <= 0 ? -1 : (limit - 1) / s;
    hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(max_o + 1, 0, static_cast<std::ptrdiff_t>(out_len)));
    return std::pair{lo, std::max(lo, hi)};
  };

  std::vector<double> out(B * Cout * Ho * Wo, 0.0);
  const double* X = input.values().data();
  const double* K = kernel.values().data();
  const double* Bs = bias.defined() ? bias.values().data() : nullptr;
  parallel_for(B * Cout, Cin * k * k * Ho * Wo, [&](std::size_t lo_idx, std::size_t hi_idx) {
    for (std::size_t idx = lo_idx; idx < hi_idx; ++idx) {
      const std::size_t b = idx / Cout, co = idx % Cout;
      double* O = out.data() + idx * Ho * Wo;
      if (Bs) std::fill(O, O + Ho * Wo, Bs[co]);
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const double* Xc = X + (b * Cin + ci) * H * W;
        for (std::size_t kh = 0; kh < k; ++kh) {
          const auto [oh0, oh1] = valid_range(kh, H, Ho);
          for (std::size_t kw = 0; kw < k; ++kw) {
            const double wv = K[((co * Cin + ci) * k + kh) * k + kw];
            const auto [ow0, ow1] = valid_range(kw, W, Wo);
            for (std::size_t oh = oh0; oh < oh1; ++oh) {
              const std::size_t ih = oh * stride + kh - padding;
              const double* xrow = Xc + ih * W;
              double* orow = O + oh * Wo;
              for (std::size_t ow = ow0; ow < ow1; ++ow) orow[ow] += wv * xrow[ow * stride + kw - padding];
            }
          }
        }
      }
    }
  });
  Tensor result(Shape{B, Cout, Ho, Wo}, std::move(out));
  detail::record("conv2d", {input, kernel, bias}, result,
                 [input, kernel, bias, result, B, Cin, H, W, Cout, k, Ho, Wo, stride, padding,
                  valid_range]() mutable {
                   const double* G = result.grad().data();
                   const double* X = input.values().data();
                   const double* K = kernel.values().data();
                   if (input.requires_grad()) {
                     double* GX = input.mutable_grad().data();
                     for (std::size_t b = 0; b < B; ++b)
                       for (std::size_t co = 0; co < Cout; ++co) {
                         const double* Go = G + (b * Cout + co) * Ho * Wo;
                         for (std::size_t ci = 0; ci < Cin; ++ci) {
                           double* GXc = GX + (b * Cin + ci) * H * W;
                           for (std::size_t kh = 0; kh < k; ++kh) {
                             const auto [oh0, oh1] = valid_range(kh, H, Ho);
                             for (std::size_t kw = 0; kw < k; ++kw) {
                               const double wv = K[((co * Cin + ci) * k + kh) * k + kw];
                               const auto [ow0, ow1] = valid_range(kw, W, Wo);
                               for (std::size_t oh = oh0; oh < oh1; ++oh) {
                                 double* gxrow = GXc + (oh * stride + kh - padding) * W;
                                 const double* grow = Go + oh * Wo;
                                 for (std::size_t ow = ow0; ow < ow1; ++ow)
                                   gxrow[ow * stride + kw - padding] += wv * grow[ow];
                               }
                             }
                           }
                         }
                       }
                   }
                   if (kernel.requires_grad()) {
                     double* GK = kernel.mutable_grad().data();
                     parallel_for(Cout, B * Cin * k * k * Ho * Wo, [&](std::size_t c_lo, std::size_t c_hi) {
                       for (std::size_t co = c_lo; co < c_hi; ++co)
                         for (std::size_t b = 0; b < B; ++b) {
                           const double* Go = G + (b * Cout + co) * Ho * Wo;
                           for (std::size_t ci = 0; ci < Cin; ++ci) {
                             const double* Xc = X + (b * Cin + ci) * H * W;
                             for (std::size_t kh = 0; kh < k; ++kh) {
                               const auto [oh0, oh1] = valid_range(kh, H, Ho);
                               for (std::size_t kw = 0; kw < k; ++kw) {
                                 const auto [ow0, ow1] = valid_range(kw, W, Wo);
                                 double acc = 0.0;
                                 for (std::size_t oh = oh0; oh < oh1; ++oh) {
                                   const double* xrow = Xc + (oh * stride + kh - padding) * W;
                                   const double* grow = Go + oh * Wo;
                                   for (std::size_t ow = ow0; ow < ow1; ++ow)
                                     acc += grow[ow] * xrow[ow * stride + kw - padding];
                                 }
                                 GK[((co * Cin + ci) * k + kh) * k + kw] += acc;
                               }
                             }
                           }
                         }
                     });
                   }
                   if (bias.defined() && bias.requires_grad()) {
                     double* GBs = bias.mutable_grad().data();
                     for (std::size_t b = 0; b < B; ++b)
                       for (std::size_t co = 0; co < Cout; ++co) {
                         const double* Go = G + (b * Cout + co) * Ho * Wo;
                         double acc = 0.0;
                         for (std::size_t i = 0; i < Ho * Wo; ++i) acc += Go[i];
                         GBs[co] += acc;
                       }
                   }
                 });
  return result;
}

Tensor pool(const Tensor& input, PoolKind kind, std::size_t window) {
  if (input.rank() != 4) throw std::invalid_argument("pool: expected [B,C,H,W], got " + shape_str(input.shape()));
  const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t HW = H * W;
  const double* X = input.values().data();
  // Each output element is a weighted sum (avg) or a copy (max) of inputs;
  // `src` stores the argmax for max kinds.
  switch (kind) {
    case PoolKind::GlobalAvg:
    case PoolKind::GlobalMax: {
      const bool is_max = kind == PoolKind::GlobalMax;
      std::vector<double> out(B * C);
      auto src = std::make_shared<std::vector<std::size_t>>(is_max ? B * C : 0);
      for (std::size_t bc = 0; bc < B * C; ++bc) {
        const double* p = X + bc * HW;
        if (is_max) {
          std::size_t best = 0;
          for (std::size_t i = 1; i < HW; ++i)
            if (p[i] > p[best]) best = i;
          (*src)[bc] = bc * HW + best;
          out[bc] = p[best];
        } else {
          double acc = 0.0;
          for (std::size_t i = 0; i < HW; ++i) acc += p[i];
          out[bc] = acc / static_cast<double>(HW);
        }
      }
      Tensor result(Shape{B, C, 1, 1}, std::move(out));
      detail::record(is_max ? "global_max_pool" : "global_avg_pool", {input}, result,
                     [input, result, src, is_max, HW]() mutable {
                       const auto g = result.grad();
                       auto gx = input.mutable_grad();
                       for (std::size_t bc = 0; bc < g.size(); ++bc) {
                         if (is_max) {
                           gx[(*src)[bc]] += g[bc];
                         } else {
                           const double share = g[bc] / static_cast<double>(HW);
                           for (std::size_t i = 0; i < HW; ++i) gx[bc * HW + i] += share;
                         }
                       }
                     });
      return result;
    }
    case PoolKind::ChannelAvg:
    case PoolKind::ChannelMax: {
      const bool is_max = kind == PoolKind::ChannelMax;
      std::vector<double> out(B * HW);
      auto src = std::make_shared<std::vector<std::size_t>>(is_max ? B * HW : 0);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) {
          const double* p = X + b * C * HW + i;
          if (is_max) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < C; ++c)
              if (p[c * HW] > p[best * HW]) best = c;
            (*src)[b * HW + i] = (b * C + best) * HW + i;
            out[b * HW + i] = p[best * HW];
          } else {
            double acc = 0.0;
            for (std::size_t c = 0; c < C; ++c) acc += p[c * HW];
            out[b * HW + i] = acc / static_cast<double>(C);
          }
        }
      Tensor result(Shape{B, 1, H, W}, std::move(out));
      detail::record(is_max ? "channel_max_pool" : "channel_avg_pool", {input}, result,
                     [input, result, src, is_max, C, HW]() mutable {
                       const auto g = result.grad();
                       auto gx = input.mutable_grad();
                       for (std::size_t o = 0; o < g.size(); ++o) {
                         if (is_max) {
                           gx[(*src)[o]] += g[o];
                         } else {
                           const std::size_t b = o / HW, i = o % HW;
                           const double share = g[o] / static_cast<double>(C);
                           for (std::size_t c = 0; c < C; ++c) gx[(b * C + c) * HW + i] += share;
                         }
                       }
                     });
      return result;
    }
    case PoolKind::WindowAvg: {
      if (window == 0 || H % window != 0 || W % window != 0) {
        throw std::invalid_argument("pool: window " + std::to_string(window) + " does not tile " +
                                    shape_str(input.shape()));
      }
      const std::size_t Ho = H / window, Wo = W / window;
      const double inv = 1.0 / static_cast<double>(window * window);
      std::vector<double> out(B * C * Ho * Wo, 0.0);
      for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t w = 0; w < W; ++w)
            out[(bc * Ho + h / window) * Wo + w / window] += X[bc * HW + h * W + w];
      for (auto& v : out) v *= inv;
      Tensor result(Shape{B, C, Ho, Wo}, std::move(out));
      detail::record("window_avg_pool", {input}, result,
                     [input, result, B, C, H, W, Ho, Wo, window, inv]() mutable {
                       const auto g = result.grad();
                       auto gx = input.mutable_grad();
                       for (std::size_t bc = 0; bc < B * C; ++bc)
                         for (std::size_t h = 0; h < H; ++h)
                           for (std::size_t w = 0; w < W; ++w)
                             gx[bc * H * W + h * W + w] += g[(bc * Ho + h / window) * Wo + w / window] * inv;
                     });
      return result;
    }
  }
  throw std::logic_error("pool: unknown kind");
}

namespace {

// One sampling coordinate along an axis for every (batch, output index) pair.
struct SampleAxis {
  std::size_t lo = 0, hi = 0;  // neighbouring pixel indices
  double frac = 0.0;           // weight of `hi`
  double d_lo_edge = 0.0;      // d(pixel coordinate)/d(box low edge)
  double d_hi_edge = 0.0;      // d(pixel coordinate)/d(box high edge)
};

SampleAxis sample_axis(double edge_lo, double edge_hi, std::size_t i, std::size_t n, std::size_t len) {
  SampleAxis s;
  const double span = static_cast<double>(len - 1);
  const double steps = static_cast<double>(n - 1);
  const double fi = static_cast<double>(i);
  // Ordered so that the full box at n == len yields exactly integer positions.
  double pos = ((edge_lo * (steps - fi) + edge_hi * fi) * span) / steps;
  s.d_lo_edge = (steps - fi) * span / steps;
  s.d_hi_edge = fi * span / steps;
  if (pos <= 0.0 || pos >= span) {
    if (pos < 0.0 || pos > span) s.d_lo_edge = s.d_hi_edge = 0.0;
    pos = std::clamp(pos, 0.0, span);
  }
  if (len == 1) {
    s.lo = s.hi = 0;
    s.frac = 0.0;
    return s;
  }
  auto base = static_cast<std::size_t>(std::floor(pos));
  if (base >= len - 1) base = len - 2;
  s.lo = base;
  s.hi = base + 1;
  s.frac = pos - static_cast<double>(base);
  return s;
}

inline double lerp_exact(double a, double b, double t) {
  if (t == 0.0) return a;
  if (t == 1.0) return b;
  return a + t * (b - a);
}

}  // namespace

Tensor bilinear_crop_resize(const Tensor& input, const Tensor& boxes, std::size_t out_h,
                            std::size_t out_w) {
  if (input.rank() != 4) {
    throw std::invalid_argument("bilinear_crop_resize: expected [B,C,H,W], got " + shape_str(input.shape()));
  }
  const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (boxes.shape() != Shape{B, 4}) shape_error("bilinear_crop_resize boxes", input.shape(), boxes.shape());
  if (out_h < 2 || out_w < 2) throw std::invalid_argument("bilinear_crop_resize: output size must be at least 2x2");
  const auto bv = boxes.values();
  for (std::size_t b = 0; b < B; ++b) {
    const double x1 = bv[b * 4], y1 = bv[b * 4 + 1], x2 = bv[b * 4 + 2], y2 = bv[b * 4 + 3];
    if (!(x2 > x1) || !(y2 > y1) || !std::isfinite(x1 + y1 + x2 + y2)) {
      throw std::invalid_argument("bilinear_crop_resize: degenerate box " + std::to_string(b));
    }
  }
  auto ys = std::make_shared<std::vector<SampleAxis>>(B * out_h);
  auto xs = std::make_shared<std::vector<SampleAxis>>(B * out_w);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < out_h; ++i) (*ys)[b * out_h + i] = sample_axis(bv[b * 4 + 1], bv[b * 4 + 3], i, out_h, H);
    for (std::size_t j = 0; j < out_w; ++j) (*xs)[b * out_w + j] = sample_axis(bv[b * 4], bv[b * 4 + 2], j, out_w, W);
  }
  const double* X = input.values().data();
  std::vector<double> out(B * C * out_h * out_w);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const double* P = X + (b * C + c) * H * W;
      double* O = out.data() + (b * C + c) * out_h * out_w;
      for (std::size_t i = 0; i < out_h; ++i) {
        const auto& sy = (*ys)[b * out_h + i];
        for (std::size_t j = 0; j < out_w; ++j) {
          const auto& sx = (*xs)[b * out_w + j];
          const double top = lerp_exact(P[sy.lo * W + sx.lo], P[sy.lo * W + sx.hi], sx.frac);
          const double bottom = sy.frac == 0.0 ? top
                                               : lerp_exact(P[sy.hi * W + sx.lo], P[sy.hi * W + sx.hi], sx.frac);
          O[i * out_w + j] = lerp_exact(top, bottom, sy.frac);
        }
      }
    }
  Tensor result(Shape{B, C, out_h, out_w}, std::move(out));
  detail::record("bilinear_crop_resize", {input, boxes}, result,
                 [input, boxes, result, ys, xs, B, C, H, W, out_h, out_w]() mutable {
                   const double* G = result.grad().data();
                   const double* X = input.values().data();
                   const bool gi = input.requires_grad();
                   const bool gb = boxes.requires_grad();
                   double* GX = gi ? input.mutable_grad().data() : nullptr;
                   double* GB = gb ? boxes.mutable_grad().data() : nullptr;
                   for (std::size_t b = 0; b < B; ++b)
                     for (std::size_t c = 0; c < C; ++c) {
                       const double* P = X + (b * C + c) * H * W;
                       double* GP = gi ? GX + (b * C + c) * H * W : nullptr;
                       const double* Gc = G + (b * C + c) * out_h * out_w;
                       for (std::size_t i = 0; i < out_h; ++i) {
                         const auto& sy = (*ys)[b * out_h + i];
                         for (std::size_t j = 0; j < out_w; ++j) {
                           const auto& sx = (*xs)[b * out_w + j];
                           const double g = Gc[i * out_w + j];
                           if (g == 0.0) continue;
                           const double wy[2] = {1.0 - sy.frac, sy.frac};
                           const double wx[2] = {1.0 - sx.frac, sx.frac};
                           const std::size_t ry[2] = {sy.lo, sy.hi};
                           const std::size_t rx[2] = {sx.lo, sx.hi};
                           if (GP) {
                             for (int u = 0; u < 2; ++u) {
                               if (wy[u] == 0.0) continue;
                               for (int v = 0; v < 2; ++v) {
                                 if (wx[v] == 0.0) continue;
                                 GP[ry[u] * W + rx[v]] += g * wy[u] * wx[v];
                               }
                             }
                           }
                           if (GB) {
                             const double v00 = P[sy.lo * W + sx.lo], v01 = P[sy.lo * W + sx.hi];
                             const double v10 = P[sy.hi * W + sx.lo], v11 = P[sy.hi * W + sx.hi];
                             const double d_dy = (1.0 - sx.frac) * (v10 - v00) + sx.frac * (v11 - v01);
                             const double d_dx = (1.0 - sy.frac) * (v01 - v00) + sy.frac * (v11 - v10);
                             GB[b * 4 + 0] += g * d_dx * sx.d_lo_edge;
                             GB[b * 4 + 2] += g * d_dx * sx.d_hi_edge;
                             GB[b * 4 + 1] += g * d_dy * sy.d_lo_edge;
                             GB[b * 4 + 3] += g * d_dy * sy.d_hi_edge;
                           }
                         }
                       }
                     }
                 });
  return result;
}

Tensor sum(const Tensor& x) {
  const auto v = x.values();
  double acc = 0.0;
  for (double e : v) acc += e;
  Tensor result = Tensor::scalar(acc);
  detail::record("sum", {x}, result, [x, result]() mutable {
    const double g = result.grad()[0];
    for (auto& e : x.mutable_grad()) e += g;
  });
  return result;
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum(const Tensor& x, std::size_t axis) {
  check_axis("sum", x, axis);
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(s.outer * s.inner, 0.0);
  const auto v = x.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += v[(o * s.len + l) * s.inner + i];
  Tensor result(out_shape, std::move(out));
  detail::record("sum_axis", {x}, result, [x, result, s]() mutable {
    const auto g = result.grad();
    auto gx = x.mutable_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < s.len; ++l)
        for (std::size_t i = 0; i < s.inner; ++i) gx[(o * s.len + l) * s.inner + i] += g[o * s.inner + i];
  });
  return result;
}

Tensor mean(const Tensor& x, std::size_t axis) {
  check_axis("mean", x, axis);
  return scale(sum(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  check_axis("concat", parts[0], axis);
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank()) shape_error("concat", parts[0].shape(), p.shape());
    for (std::size_t d = 0; d < p.rank(); ++d) {
      if (d != axis && p.dim(d) != parts[0].dim(d)) shape_error("concat", parts[0].shape(), p.shape());
    }
    out_shape[axis] += p.dim(axis);
  }
  const AxisSplit s = split_at(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.dim(axis);
    const auto v = p.values();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner), len * s.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * s.len + offset) * s.inner));
    offset += len;
  }
  Tensor result(out_shape, std::move(out));
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  detail::record("concat", inputs, result, [inputs, result, s, offsets, axis]() mutable {
    const auto g = result.grad();
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      auto& p = inputs[k];
      if (!p.requires_grad()) continue;
      const std::size_t len = p.dim(axis);
      auto gp = p.mutable_grad();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < len * s.inner; ++e)
          gp[o * len * s.inner + e] += g[(o * s.len + offsets[k]) * s.inner + e];
    }
  });
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) shape_error("reshape", x.shape(), shape);
  std::vector<double> values(x.values().begin(), x.values().end());
  Tensor result(std::move(shape), std::move(values));
  detail::record("reshape", {x}, result, [x, result]() mutable {
    const auto g = result.grad();
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return result;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t r = x.rank();
  std::vector<bool> seen(r, false);
  if (order.size() != r) throw std::invalid_argument("permute: order rank mismatch for " + shape_str(x.shape()));
  for (auto a : order) {
    if (a >= r || seen[a]) throw std::invalid_argument("permute: invalid axis order for " + shape_str(x.shape()));
    seen[a] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(order[i]);
  const auto in_strides = row_major_strides(x.shape());
  const std::size_t n = x.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> coord(r, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t s = 0;
    for (std::size_t d = 0; d < r; ++d) s += coord[d] * in_strides[order[d]];
    (*src)[i] = s;
    for (std::size_t d = r; d-- > 0;) {
      if (++coord[d] < out_shape[d]) break;
      coord[d] = 0;
    }
  }
  const auto v = x.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = v[(*src)[i]];
  Tensor result(out_shape, std::move(out));
  detail::record("permute", {x}, result, [x, result, src]() mutable {
    const auto g = result.grad();
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*src)[i]] += g[i];
  });
  return result;
}

Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1) {
  check_axis("transpose", x, axis0);
  check_axis("transpose", x, axis1);
  std::vector<std::size_t> order(x.rank());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[axis0], order[axis1]);
  return permute(x, order);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  check_axis("slice", x, axis);
  if (begin >= end || end > x.dim(axis)) {
    throw std::invalid_argument("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                ") invalid for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t len = end - begin;
  std::vector<double> out(s.outer * len * s.inner);
  const auto v = x.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>((o * s.len + begin) * s.inner), len * s.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner));
  Tensor result(out_shape, std::move(out));
  detail::record("slice", {x}, result, [x, result, s, begin, len]() mutable {
    const auto g = result.grad();
    auto gx = x.mutable_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < len * s.inner; ++e) gx[(o * s.len + begin) * s.inner + e] += g[o * len * s.inner + e];
  });
  return result;
}

Tensor gather_rows(const Tensor& x, std::span<const std::ptrdiff_t> rows) {
  if (x.rank() != 2) throw std::invalid_argument("gather_rows: expected rank 2, got " + shape_str(x.shape()));
  if (rows.empty()) throw std::invalid_argument("gather_rows: empty index list");
  const std::size_t R = x.dim(0), D = x.dim(1);
  for (auto r : rows) {
    if (r >= static_cast<std::ptrdiff_t>(R)) {
      throw std::invalid_argument("gather_rows: row " + std::to_string(r) + " out of range for " + shape_str(x.shape()));
    }
  }
  auto index = std::make_shared<std::vector<std::ptrdiff_t>>(rows.begin(), rows.end());
  std::vector<double> out(rows.size() * D, 0.0);
  const auto v = x.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0) continue;
    std::copy_n(v.begin() + rows[i] * static_cast<std::ptrdiff_t>(D), D,
                out.begin() + static_cast<std::ptrdiff_t>(i * D));
  }
  Tensor result(Shape{rows.size(), D}, std::move(out));
  detail::record("gather_rows", {x}, result, [x, result, index, D]() mutable {
    const auto g = result.grad();
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < index->size(); ++i) {
      const auto r = (*index)[i];
      if (r < 0) continue;
      for (std::size_t d = 0; d < D; ++d) gx[static_cast<std::size_t>(r) * D + d] += g[i * D + d];
    }
  });
  return result;
}

Tensor softmax(const Tensor& x) {
  if (x.rank() < 1) throw std::invalid_argument("softmax: scalar input");
  const std::size_t N = x.dim(x.rank() - 1);
  const std::size_t rows = x.numel() / N;
  const auto v = x.values();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = v.data() + r * N;
    double* o = out.data() + r * N;
    const double m = *std::max_element(in, in + N);
    double z = 0.0;
    for (std::size_t j = 0; j < N; ++j) z += (o[j] = std::exp(in[j] - m));
    for (std::size_t j = 0; j < N; ++j) o[j] /= z;
  }
  Tensor result(x.shape(), std::move(out));
  detail::record("softmax", {x}, result, [x, result, rows, N]() mutable {
    const auto g = result.grad();
    const auto y = result.values();
    auto gx = x.mutable_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < N; ++j) dot += g[r * N + j] * y[r * N + j];
      for (std::size_t j = 0; j < N; ++j) gx[r * N + j] += y[r * N + j] * (g[r * N + j] - dot);
    }
  });
  return result;
}

bool all_finite(const Tensor& x, bool include_grad) {
  for (double v : x.values())
    if (!std::isfinite(v)) return false;
  if (include_grad) {
    for (double v : x.grad())
      if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace mxa
