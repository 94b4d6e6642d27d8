#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mxa/tensor.hpp"

namespace mxa::nn {

// Heads split embed_dim evenly. A window larger than the token grid behaves as
// a single global window.
class AttentionConfig {
 public:
  AttentionConfig(std::size_t embed_dim, std::size_t num_heads,
                  std::optional<std::size_t> window = std::nullopt);

  std::size_t embed_dim() const { return embed_dim_; }
  std::size_t num_heads() const { return num_heads_; }
  std::size_t head_dim() const { return embed_dim_ / num_heads_; }
  std::optional<std::size_t> window() const { return window_; }

 private:
  std::size_t embed_dim_;
  std::size_t num_heads_;
  std::optional<std::size_t> window_;
};

struct AttentionParams {
  Tensor qkv_weight;  // [D, 3D], columns ordered q | k | v
  Tensor qkv_bias;    // [3D]
  Tensor out_weight;  // [D, D]
  Tensor out_bias;    // [D]

  static AttentionParams init(std::size_t embed_dim, std::uint64_t seed, const std::string& prefix);
};

// Token form of a feature map: tokens [B, N, D] with N = grid_h * grid_w in
// row-major grid order.
struct TokenGrid {
  Tensor tokens;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
};

TokenGrid map_to_tokens(const Tensor& map);
Tensor tokens_to_map(const TokenGrid& grid);

// Attention weights captured during a forward pass (values only).
struct AttentionProbe {
  Tensor weights;  // [B * windows, heads, P, P]
  std::size_t batch = 0;
  std::size_t tokens = 0;
  std::size_t windows_per_image = 0;
  std::size_t window_slots = 0;
  std::vector<std::ptrdiff_t> slot_token;  // slot -> token index within its image, -1 for padding

  // Mass each token receives as a key, summed over its window's queries and
  // averaged over heads. Shape [batch][tokens].
  std::vector<std::vector<double>> received_mass() const;
};

TokenGrid mhsa(const TokenGrid& x, const AttentionConfig& cfg, const AttentionParams& params,
               AttentionProbe* probe = nullptr);

// Attention restricted to non-overlapping window x window tiles of the grid.
// Ragged edge tiles are padded with masked slots that receive zero weight.
TokenGrid windowed_mhsa(const TokenGrid& x, const AttentionConfig& cfg, const AttentionParams& params,
                        AttentionProbe* probe = nullptr);

// Sum of the attention branch and the MXA branch, both in map form.
Tensor parallel_fuse(const Tensor& f_mhsa, const Tensor& f_mxa);

inline constexpr double kMaskedLogit = -1e9;

}  // namespace mxa::nn
