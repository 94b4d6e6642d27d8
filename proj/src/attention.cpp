#include "mxa/attention.hpp"

#include <cmath>

#include "mxa/init.hpp"
#include "mxa/ops.hpp"

namespace mxa::nn {

AttentionConfig::AttentionConfig(std::size_t embed_dim, std::size_t num_heads,
                                 std::optional<std::size_t> window)
    : embed_dim_(embed_dim), num_heads_(num_heads), window_(window) {
  if (embed_dim == 0 || num_heads == 0) throw std::invalid_argument("attention: embed_dim and num_heads must be positive");
  if (embed_dim % num_heads != 0) {
    throw std::invalid_argument("attention: embed_dim " + std::to_string(embed_dim) +
                                " not divisible by num_heads " + std::to_string(num_heads));
  }
  if (window && *window == 0) throw std::invalid_argument("attention: window must be positive");
}

AttentionParams AttentionParams::init(std::size_t embed_dim, std::uint64_t seed, const std::string& prefix) {
  AttentionParams p;
  p.qkv_weight = uniform_parameter({embed_dim, 3 * embed_dim}, embed_dim, seed, prefix + ".qkv.weight");
  p.qkv_bias = uniform_parameter({3 * embed_dim}, embed_dim, seed, prefix + ".qkv.bias");
  p.out_weight = uniform_parameter({embed_dim, embed_dim}, embed_dim, seed, prefix + ".proj.weight");
  p.out_bias = uniform_parameter({embed_dim}, embed_dim, seed, prefix + ".proj.bias");
  return p;
}

TokenGrid map_to_tokens(const Tensor& map) {
  if (map.rank() != 4) throw std::invalid_argument("map_to_tokens: expected [B,C,H,W], got " + shape_str(map.shape()));
  const std::size_t B = map.dim(0), C = map.dim(1), H = map.dim(2), W = map.dim(3);
  Tensor t = reshape(permute(map, {0, 2, 3, 1}), {B, H * W, C});
  return TokenGrid{t, H, W};
}

Tensor tokens_to_map(const TokenGrid& grid) {
  const auto& t = grid.tokens;
  if (t.rank() != 3 || t.dim(1) != grid.grid_h * grid.grid_w) {
    throw std::invalid_argument("tokens_to_map: tokens " + shape_str(t.shape()) + " do not match grid " +
                                std::to_string(grid.grid_h) + "x" + std::to_string(grid.grid_w));
  }
  const std::size_t B = t.dim(0), D = t.dim(2);
  return permute(reshape(t, {B, grid.grid_h, grid.grid_w, D}), {0, 3, 1, 2});
}

std::vector<std::vector<double>> AttentionProbe::received_mass() const {
  std::vector<std::vector<double>> mass(batch, std::vector<double>(tokens, 0.0));
  if (!weights.defined()) return mass;
  const std::size_t heads = weights.dim(1);
  const std::size_t P = window_slots;
  const auto w = weights.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t win = 0; win < windows_per_image; ++win) {
      const std::size_t bw = b * windows_per_image + win;
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t q = 0; q < P; ++q) {
          if (slot_token[win * P + q] < 0) continue;  // padded queries are discarded
          for (std::size_t k = 0; k < P; ++k) {
            const auto tok = slot_token[win * P + k];
            if (tok < 0) continue;
            mass[b][static_cast<std::size_t>(tok)] += w[((bw * heads + h) * P + q) * P + k] / static_cast<double>(heads);
          }
        }
    }
  return mass;
}

namespace {

TokenGrid attend(const TokenGrid& x, const AttentionConfig& cfg, const AttentionParams& params, std::size_t win_h,
                 std::size_t win_w, AttentionProbe* probe) {
  const Tensor& tokens = x.tokens;
  if (tokens.rank() != 3 || tokens.dim(2) != cfg.embed_dim() || tokens.dim(1) != x.grid_h * x.grid_w) {
    throw std::invalid_argument("attention: tokens " + shape_str(tokens.shape()) + " incompatible with embed_dim " +
                                std::to_string(cfg.embed_dim()) + " and grid " + std::to_string(x.grid_h) + "x" +
                                std::to_string(x.grid_w));
  }
  const std::size_t B = tokens.dim(0), N = tokens.dim(1), D = cfg.embed_dim();
  const std::size_t heads = cfg.num_heads(), dh = cfg.head_dim();
  const std::size_t nwh = (x.grid_h + win_h - 1) / win_h;
  const std::size_t nww = (x.grid_w + win_w - 1) / win_w;
  const std::size_t windows = nwh * nww;
  const std::size_t P = win_h * win_w;
  const std::size_t BW = B * windows;

  // Window partition: slot -> token (per image), plus the inverse for merging.
  std::vector<std::ptrdiff_t> slot_token(windows * P, -1);
  std::vector<std::ptrdiff_t> token_slot(N, -1);
  bool padded = false;
  for (std::size_t wi = 0; wi < nwh; ++wi)
    for (std::size_t wj = 0; wj < nww; ++wj)
      for (std::size_t u = 0; u < win_h; ++u)
        for (std::size_t v = 0; v < win_w; ++v) {
          const std::size_t slot = (wi * nww + wj) * P + u * win_w + v;
          const std::size_t r = wi * win_h + u, c = wj * win_w + v;
          if (r < x.grid_h && c < x.grid_w) {
            slot_token[slot] = static_cast<std::ptrdiff_t>(r * x.grid_w + c);
            token_slot[r * x.grid_w + c] = static_cast<std::ptrdiff_t>(slot);
          } else {
            padded = true;
          }
        }
  std::vector<std::ptrdiff_t> gather(BW * P), merge(B * N);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t s = 0; s < windows * P; ++s) {
      gather[b * windows * P + s] = slot_token[s] < 0 ? -1 : static_cast<std::ptrdiff_t>(b * N) + slot_token[s];
    }
    for (std::size_t n = 0; n < N; ++n) merge[b * N + n] = static_cast<std::ptrdiff_t>(b * windows * P) + token_slot[n];
  }

  Tensor rows = gather_rows(reshape(tokens, {B * N, D}), gather);           // [BW*P, D]
  Tensor qkv = linear(rows, params.qkv_weight, params.qkv_bias);            // [BW*P, 3D]
  Tensor split = permute(reshape(qkv, {BW, P, 3, heads, dh}), {2, 0, 3, 1, 4});  // [3, BW, H, P, dh]
  Tensor q = reshape(slice(split, 0, 0, 1), {BW * heads, P, dh});
  Tensor k = reshape(slice(split, 0, 1, 2), {BW * heads, P, dh});
  Tensor v = reshape(slice(split, 0, 2, 3), {BW * heads, P, dh});
  Tensor scores = scale(matmul(q, transpose(k, 1, 2)), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (padded) {
    std::vector<double> mask(BW * heads * P * P, 0.0);
    for (std::size_t bw = 0; bw < BW; ++bw) {
      const std::size_t win = bw % windows;
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t qi = 0; qi < P; ++qi)
          for (std::size_t kj = 0; kj < P; ++kj)
            if (slot_token[win * P + kj] < 0) mask[((bw * heads + h) * P + qi) * P + kj] = kMaskedLogit;
    }
    scores = add(scores, Tensor(scores.shape(), std::move(mask)));
  }
  Tensor attn = softmax(scores);  // [BW*H, P, P]
  if (probe) {
    probe->weights = reshape(attn.detach(), {BW, heads, P, P}).detach();
    probe->batch = B;
    probe->tokens = N;
    probe->windows_per_image = windows;
    probe->window_slots = P;
    probe->slot_token = slot_token;
  }
  Tensor ctx = matmul(attn, v);                                              // [BW*H, P, dh]
  Tensor merged = reshape(permute(reshape(ctx, {BW, heads, P, dh}), {0, 2, 1, 3}), {BW * P, D});
  Tensor back = gather_rows(merged, merge);                                  // [B*N, D]
  Tensor out = linear(back, params.out_weight, params.out_bias);
  return TokenGrid{reshape(out, {B, N, D}), x.grid_h, x.grid_w};
}

}  // namespace

TokenGrid mhsa(const TokenGrid& x, const AttentionConfig& cfg, const AttentionParams& params, AttentionProbe* probe) {
  return attend(x, cfg, params, x.grid_h, x.grid_w, probe);
}

TokenGrid windowed_mhsa(const TokenGrid& x, const AttentionConfig& cfg, const AttentionParams& params,
                        AttentionProbe* probe) {
  if (!cfg.window()) throw std::invalid_argument("windowed_mhsa: config has no window");
  const std::size_t w = *cfg.window();
  return attend(x, cfg, params, std::min(w, x.grid_h), std::min(w, x.grid_w), probe);
}

Tensor parallel_fuse(const Tensor& f_mhsa, const Tensor& f_mxa) {
  if (f_mhsa.shape() != f_mxa.shape()) {
    throw std::invalid_argument("parallel_fuse: shape mismatch " + shape_str(f_mhsa.shape()) + " vs " +
                                shape_str(f_mxa.shape()));
  }
  return add(f_mhsa, f_mxa);
}

}  // namespace mxa::nn
