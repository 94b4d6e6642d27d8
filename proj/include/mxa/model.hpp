#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mxa/attention.hpp"
#include "mxa/mxa_block.hpp"
#include "mxa/tensor.hpp"

namespace mxa::model {

struct ModelConfig {
  std::string name = "M5-nano";
  std::array<std::size_t, 3> widths{16, 24, 32};
  std::array<std::size_t, 3> depths{1, 3, 4};
  std::array<std::size_t, 3> heads{2, 2, 4};
  std::size_t patch_size = 8;
  std::size_t window = 7;
  std::size_t image_size = 64;
  std::size_t num_labels = 14;
  bool mxa_enabled = true;
  std::size_t cbam_reduction = 4;
  std::size_t spatial_kernel = 7;

  // Throws std::invalid_argument naming the first violated constraint.
  void validate() const;
  // Token grid side per stage: image / patch, then halved (rounding up).
  std::array<std::size_t, 3> grid_sides() const;

  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys are an error.
  static ModelConfig from_json(const nlohmann::json& j);
};

// "M5-nano" (desk default), "M5-nano-8x8" (8x8 images, for gradient checks)
// and the full-size "M0" ... "M5".
ModelConfig preset(std::string_view name);
std::vector<std::string> preset_names();

struct Block {
  nn::AttentionParams attn;
  nn::RoiPredictorParams roi;
  nn::CbamParams cbam;
  Tensor fc1_weight, fc1_bias;  // [C, 2C], [2C]
  Tensor fc2_weight, fc2_bias;  // [2C, C], [C]
};

struct Stage {
  Tensor down_weight, down_bias;  // undefined for the first stage
  std::size_t down_kernel = 0;
  std::size_t down_padding = 0;
  std::vector<Block> blocks;
};

struct ForwardOptions {
  // Keeps the MXA parameters but fuses a zero map in place of their output.
  bool zero_mxa_branch = false;
};

struct ForwardTrace {
  std::vector<nn::AttentionProbe> probes;  // one per block
  std::vector<Tensor> boxes;               // one per block with MXA
  std::vector<std::size_t> block_stage;    // stage index of each probe
};

class Model {
 public:
  static Model build(const ModelConfig& cfg, std::uint64_t seed);

  // images [B, 1, S, S] -> logits [B, num_labels]
  Tensor forward(const Tensor& images, ForwardTrace* trace = nullptr, const ForwardOptions& opts = {}) const;

  const ModelConfig& config() const { return cfg_; }
  // Canonical path -> parameter, in a fixed order.
  std::vector<std::pair<std::string, Tensor>> parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();
  // Copies values in; every parameter must be present with a matching shape.
  void load_parameters(const std::map<std::string, Tensor>& values, std::string_view prefix = "");

  Tensor patch_weight, patch_bias;
  std::array<Stage, 3> stages;
  Tensor head_weight, head_bias;

 private:
  ModelConfig cfg_;
};

struct StageAttention {
  std::size_t stage = 0;
  std::size_t grid_h = 0, grid_w = 0;
  // [image][token]: mass received as a key, averaged over heads and blocks.
  std::vector<std::vector<double>> mass;
  // Same, min-max scaled to [0, 1] per image; a flat map scores 1.
  std::vector<std::vector<double>> normalized;
};

std::vector<StageAttention> attention_scores(const Model& model, const Tensor& images);
// Elementwise difference of normalized maps (a - b).
std::vector<StageAttention> attention_delta(const std::vector<StageAttention>& a,
                                            const std::vector<StageAttention>& b);

// Archive of MXAT records behind a JSON manifest:
//   "MXAZ" | u64 manifest bytes | manifest | records
// Records are stored in double precision so a save/load cycle is exact.
struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  std::uint64_t epoch = 0;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json extra = nlohmann::json::object();
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mxa::model
