#include "mxa/model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include "mxa/init.hpp"
#include "mxa/ops.hpp"
#include "mxa/serialize.hpp"

namespace mxa::model {

using nlohmann::json;

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (patch_size == 0) fail("patch_size must be positive");
  if (image_size == 0 || image_size % patch_size != 0) {
    fail("image_size " + std::to_string(image_size) + " not divisible by patch_size " + std::to_string(patch_size));
  }
  if (window == 0) fail("window must be positive");
  if (num_labels == 0) fail("num_labels must be positive");
  if (spatial_kernel % 2 == 0) fail("spatial_kernel must be odd");
  if (cbam_reduction == 0) fail("cbam_reduction must be positive");
  const auto grids = grid_sides();
  for (std::size_t i = 0; i < 3; ++i) {
    const auto s = "stage " + std::to_string(i) + ": ";
    if (widths[i] == 0 || heads[i] == 0 || depths[i] == 0) fail(s + "width, depth and heads must be positive");
    if (widths[i] % heads[i] != 0) {
      fail(s + "width " + std::to_string(widths[i]) + " not divisible by heads " + std::to_string(heads[i]));
    }
    if (grids[i] < 1) fail(s + "token grid vanished");
    if (mxa_enabled) {
      if (widths[i] % cbam_reduction != 0) {
        fail(s + "width " + std::to_string(widths[i]) + " not divisible by cbam_reduction " +
             std::to_string(cbam_reduction));
      }
      if (grids[i] < 2) fail(s + "MXA needs a token grid of at least 2x2, got " + std::to_string(grids[i]));
    }
  }
}

std::array<std::size_t, 3> ModelConfig::grid_sides() const {
  std::array<std::size_t, 3> g{};
  g[0] = patch_size == 0 ? 0 : image_size / patch_size;
  g[1] = (g[0] + 1) / 2;
  g[2] = (g[1] + 1) / 2;
  return g;
}

json ModelConfig::to_json() const {
  return json{{"name", name},
              {"widths", widths},
              {"depths", depths},
              {"heads", heads},
              {"patch_size", patch_size},
              {"window", window},
              {"image_size", image_size},
              {"num_labels", num_labels},
              {"mxa_enabled", mxa_enabled},
              {"cbam_reduction", cbam_reduction},
              {"spatial_kernel", spatial_kernel}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("model config: expected an object");
  ModelConfig c;
  if (j.contains("preset")) c = preset(j.at("preset").get<std::string>());
  static const std::set<std::string> known = {"preset",     "name",        "widths",      "depths",
                                              "heads",      "patch_size",  "window",      "image_size",
                                              "num_labels", "mxa_enabled", "cbam_reduction", "spatial_kernel"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw std::invalid_argument("model config: unknown key \"" + key + "\"");
  try {
    if (j.contains("name")) c.name = j["name"].get<std::string>();
    if (j.contains("widths")) c.widths = j["widths"].get<std::array<std::size_t, 3>>();
    if (j.contains("depths")) c.depths = j["depths"].get<std::array<std::size_t, 3>>();
    if (j.contains("heads")) c.heads = j["heads"].get<std::array<std::size_t, 3>>();
    if (j.contains("patch_size")) c.patch_size = j["patch_size"].get<std::size_t>();
    if (j.contains("window")) c.window = j["window"].get<std::size_t>();
    if (j.contains("image_size")) c.image_size = j["image_size"].get<std::size_t>();
    if (j.contains("num_labels")) c.num_labels = j["num_labels"].get<std::size_t>();
    if (j.contains("mxa_enabled")) c.mxa_enabled = j["mxa_enabled"].get<bool>();
    if (j.contains("cbam_reduction")) c.cbam_reduction = j["cbam_reduction"].get<std::size_t>();
    if (j.contains("spatial_kernel")) c.spatial_kernel = j["spatial_kernel"].get<std::size_t>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

ModelConfig preset(std::string_view name) {
  ModelConfig c;
  c.name = std::string(name);
  if (name == "M5-nano") return c;
  if (name == "M5-nano-8x8") {
    c.image_size = 8;
    c.patch_size = 1;
    return c;
  }
  struct Row {
    std::string_view name;
    std::array<std::size_t, 3> w, d, h;
  };
  static const Row rows[] = {{"M0", {64, 128, 192}, {1, 2, 3}, {4, 4, 4}},
                             {"M1", {128, 144, 192}, {1, 2, 3}, {2, 3, 3}},
                             {"M2", {128, 192, 224}, {1, 2, 3}, {4, 3, 2}},
                             {"M3", {128, 240, 320}, {1, 2, 3}, {4, 3, 4}},
                             {"M4", {128, 256, 384}, {1, 2, 3}, {4, 4, 4}},
                             {"M5", {192, 288, 384}, {1, 3, 4}, {3, 3, 4}}};
  for (const auto& r : rows) {
    if (r.name != name) continue;
    c.widths = r.w;
    c.depths = r.d;
    c.heads = r.h;
    c.patch_size = 16;
    c.image_size = 224;
    return c;
  }
  throw std::invalid_argument("unknown model preset \"" + std::string(name) + "\"");
}

std::vector<std::string> preset_names() { return {"M5-nano", "M5-nano-8x8", "M0", "M1", "M2", "M3", "M4", "M5"}; }

namespace {

std::string stage_path(std::size_t s) { return "stages." + std::to_string(s); }
std::string block_path(std::size_t s, std::size_t b) { return stage_path(s) + ".blocks." + std::to_string(b); }

}  // namespace

Model Model::build(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  using nn::uniform_parameter;
  Model m;
  m.cfg_ = cfg;
  const std::size_t p = cfg.patch_size;
  const std::size_t C0 = cfg.widths[0];
  m.patch_weight = uniform_parameter({C0, 1, p, p}, p * p, seed, "patch_embed.weight");
  m.patch_bias = uniform_parameter({C0}, p * p, seed, "patch_embed.bias");
  const auto grids = cfg.grid_sides();
  for (std::size_t s = 0; s < 3; ++s) {
    Stage& st = m.stages[s];
    const std::size_t C = cfg.widths[s];
    if (s > 0) {
      // Stride-2 downsample; the kernel adapts so the output grid is exact.
      const std::size_t prev = grids[s - 1];
      st.down_kernel = prev % 2 == 0 ? 2 : 3;
      st.down_padding = prev % 2 == 0 ? 0 : 1;
      const std::size_t Cin = cfg.widths[s - 1];
      const std::size_t k = st.down_kernel;
      const std::size_t fan = Cin * k * k;
      st.down_weight = uniform_parameter({C, Cin, k, k}, fan, seed, stage_path(s) + ".downsample.weight");
      st.down_bias = uniform_parameter({C}, fan, seed, stage_path(s) + ".downsample.bias");
    }
    for (std::size_t b = 0; b < cfg.depths[s]; ++b) {
      const auto path = block_path(s, b);
      Block blk;
      blk.attn = nn::AttentionParams::init(C, seed, path + ".attn");
      if (cfg.mxa_enabled) {
        blk.roi = nn::RoiPredictorParams::init(C, seed, path + ".mxa.roi");
        blk.cbam = nn::CbamParams::init(C, cfg.cbam_reduction, seed, path + ".mxa.cbam", cfg.spatial_kernel);
      }
      blk.fc1_weight = uniform_parameter({C, 2 * C}, C, seed, path + ".mlp.fc1.weight");
      blk.fc1_bias = uniform_parameter({2 * C}, C, seed, path + ".mlp.fc1.bias");
      blk.fc2_weight = uniform_parameter({2 * C, C}, 2 * C, seed, path + ".mlp.fc2.weight");
      blk.fc2_bias = uniform_parameter({C}, 2 * C, seed, path + ".mlp.fc2.bias");
      st.blocks.push_back(std::move(blk));
    }
  }
  const std::size_t C3 = cfg.widths[2];
  m.head_weight = uniform_parameter({C3, cfg.num_labels}, C3, seed, "head.weight");
  m.head_bias = uniform_parameter({cfg.num_labels}, C3, seed, "head.bias");
  return m;
}

namespace {

void check_finite(const Tensor& t, const std::string& path) {
  if (!all_finite(t)) throw NumericError("non-finite activation at " + path);
}

}  // namespace

Tensor Model::forward(const Tensor& images, ForwardTrace* trace, const ForwardOptions& opts) const {
  const std::size_t S = cfg_.image_size;
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != S || images.dim(3) != S) {
    throw std::invalid_argument("model forward: expected [B,1," + std::to_string(S) + "," + std::to_string(S) +
                                "], got " + shape_str(images.shape()));
  }
  check_finite(images, "input");
  const std::size_t B = images.dim(0);
  Tensor x = conv2d(images, patch_weight, patch_bias, cfg_.patch_size, 0);
  check_finite(x, "patch_embed");
  for (std::size_t s = 0; s < 3; ++s) {
    const Stage& st = stages[s];
    const std::size_t C = cfg_.widths[s];
    if (s > 0) {
      x = relu(conv2d(x, st.down_weight, st.down_bias, 2, st.down_padding));
      check_finite(x, stage_path(s) + ".downsample");
    }
    const nn::AttentionConfig acfg(C, cfg_.heads[s], cfg_.window);
    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
      const Block& blk = st.blocks[b];
      const auto path = block_path(s, b);
      nn::AttentionProbe* probe = nullptr;
      if (trace) {
        trace->probes.emplace_back();
        trace->block_stage.push_back(s);
        probe = &trace->probes.back();
      }
      Tensor attn = nn::tokens_to_map(nn::windowed_mhsa(nn::map_to_tokens(x), acfg, blk.attn, probe));
      Tensor branch;
      if (cfg_.mxa_enabled && !opts.zero_mxa_branch) {
        Tensor boxes;
        branch = nn::mxa_forward(x, blk.roi, blk.cbam, &boxes);
        if (trace) trace->boxes.push_back(boxes);
      } else if (opts.zero_mxa_branch) {
        branch = Tensor::zeros(attn.shape());
      }
      x = add(x, branch.defined() ? nn::parallel_fuse(attn, branch) : attn);
      check_finite(x, path + ".mixer");
      const nn::TokenGrid tokens = nn::map_to_tokens(x);
      Tensor h = linear(relu(linear(tokens.tokens, blk.fc1_weight, blk.fc1_bias)), blk.fc2_weight, blk.fc2_bias);
      x = add(x, nn::tokens_to_map({h, tokens.grid_h, tokens.grid_w}));
      check_finite(x, path + ".mlp");
    }
  }
  Tensor pooled = reshape(pool(x, PoolKind::GlobalAvg), {B, cfg_.widths[2]});
  Tensor logits = linear(pooled, head_weight, head_bias);
  check_finite(logits, "head");
  return logits;
}

std::vector<std::pair<std::string, Tensor>> Model::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("patch_embed.weight", patch_weight);
  out.emplace_back("patch_embed.bias", patch_bias);
  for (std::size_t s = 0; s < 3; ++s) {
    const Stage& st = stages[s];
    if (st.down_weight.defined()) {
      out.emplace_back(stage_path(s) + ".downsample.weight", st.down_weight);
      out.emplace_back(stage_path(s) + ".downsample.bias", st.down_bias);
    }
    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
      const Block& blk = st.blocks[b];
      const auto p = block_path(s, b);
      out.emplace_back(p + ".attn.qkv.weight", blk.attn.qkv_weight);
      out.emplace_back(p + ".attn.qkv.bias", blk.attn.qkv_bias);
      out.emplace_back(p + ".attn.proj.weight", blk.attn.out_weight);
      out.emplace_back(p + ".attn.proj.bias", blk.attn.out_bias);
      if (cfg_.mxa_enabled) {
        out.emplace_back(p + ".mxa.roi.conv1.weight", blk.roi.conv1_weight);
        out.emplace_back(p + ".mxa.roi.conv1.bias", blk.roi.conv1_bias);
        out.emplace_back(p + ".mxa.roi.conv2.weight", blk.roi.conv2_weight);
        out.emplace_back(p + ".mxa.roi.conv2.bias", blk.roi.conv2_bias);
        out.emplace_back(p + ".mxa.roi.fc.weight", blk.roi.fc_weight);
        out.emplace_back(p + ".mxa.roi.fc.bias", blk.roi.fc_bias);
        out.emplace_back(p + ".mxa.cbam.mlp.w1", blk.cbam.w1);
        out.emplace_back(p + ".mxa.cbam.mlp.w2", blk.cbam.w2);
        out.emplace_back(p + ".mxa.cbam.spatial.weight", blk.cbam.spatial_kernel);
      }
      out.emplace_back(p + ".mlp.fc1.weight", blk.fc1_weight);
      out.emplace_back(p + ".mlp.fc1.bias", blk.fc1_bias);
      out.emplace_back(p + ".mlp.fc2.weight", blk.fc2_weight);
      out.emplace_back(p + ".mlp.fc2.bias", blk.fc2_bias);
    }
  }
  out.emplace_back("head.weight", head_weight);
  out.emplace_back("head.bias", head_bias);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : parameters()) n += t.numel();
  return n;
}

void Model::zero_grad() {
  for (auto& [_, t] : parameters()) t.zero_grad();
}

void Model::load_parameters(const std::map<std::string, Tensor>& values, std::string_view prefix) {
  for (auto& [path, t] : parameters()) {
    const auto key = std::string(prefix) + path;
    auto it = values.find(key);
    if (it == values.end()) throw std::invalid_argument("checkpoint: missing parameter " + key);
    if (it->second.shape() != t.shape()) {
      throw std::invalid_argument("checkpoint: parameter " + key + " has shape " + shape_str(it->second.shape()) +
                                  ", model expects " + shape_str(t.shape()));
    }
    std::copy(it->second.values().begin(), it->second.values().end(), t.mutable_values().begin());
  }
}

std::vector<StageAttention> attention_scores(const Model& model, const Tensor& images) {
  NoGradGuard guard;
  ForwardTrace trace;
  (void)model.forward(images, &trace);
  const auto grids = model.config().grid_sides();
  const std::size_t B = images.dim(0);
  std::vector<StageAttention> out(3);
  std::array<std::size_t, 3> blocks{};
  for (std::size_t s = 0; s < 3; ++s) {
    out[s].stage = s;
    out[s].grid_h = out[s].grid_w = grids[s];
    out[s].mass.assign(B, std::vector<double>(grids[s] * grids[s], 0.0));
  }
  for (std::size_t i = 0; i < trace.probes.size(); ++i) {
    const std::size_t s = trace.block_stage[i];
    const auto mass = trace.probes[i].received_mass();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < mass[b].size(); ++t) out[s].mass[b][t] += mass[b][t];
    ++blocks[s];
  }
  for (std::size_t s = 0; s < 3; ++s) {
    auto& st = out[s];
    st.normalized = st.mass;
    for (std::size_t b = 0; b < B; ++b) {
      for (auto& v : st.mass[b]) v /= static_cast<double>(blocks[s]);
      auto& n = st.normalized[b];
      n = st.mass[b];
      const auto [lo, hi] = std::minmax_element(n.begin(), n.end());
      const double a = *lo, range = *hi - *lo;
      for (auto& v : n) v = range > 0.0 ? (v - a) / range : 1.0;
    }
  }
  return out;
}

std::vector<StageAttention> attention_delta(const std::vector<StageAttention>& a,
                                            const std::vector<StageAttention>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("attention_delta: stage count mismatch");
  std::vector<StageAttention> out = a;
  for (std::size_t s = 0; s < a.size(); ++s) {
    if (a[s].normalized.size() != b[s].normalized.size() || a[s].grid_h != b[s].grid_h ||
        a[s].grid_w != b[s].grid_w) {
      throw std::invalid_argument("attention_delta: stage " + std::to_string(s) + " shape mismatch");
    }
    for (std::size_t i = 0; i < a[s].normalized.size(); ++i)
      for (std::size_t t = 0; t < a[s].normalized[i].size(); ++t) {
        out[s].normalized[i][t] = a[s].normalized[i][t] - b[s].normalized[i][t];
        out[s].mass[i][t] = a[s].mass[i][t] - b[s].mass[i][t];
      }
  }
  return out;
}

namespace {

constexpr char kArchiveMagic[4] = {'M', 'X', 'A', 'Z'};

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  json entries = json::array();
  for (const auto& [key, t] : ckpt.tensors) entries.push_back({{"key", key}, {"shape", t.shape()}});
  const json manifest{{"format", "mxa-checkpoint"}, {"version", 1},           {"epoch", ckpt.epoch},
                      {"config", ckpt.config},      {"extra", ckpt.extra},    {"entries", entries},
                      {"precision", "f64"}};
  const std::string text = manifest.dump();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp);
    out.write(kArchiveMagic, 4);
    put_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [_, t] : ckpt.tensors) write_tensor(out, t, StoragePrecision::Float64);
    if (!out) throw std::runtime_error("write failed for checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kArchiveMagic, 4) != 0) {
    throw std::runtime_error("checkpoint " + path + ": bad magic");
  }
  const std::uint64_t len = get_u64(in);
  if (len > (std::uint64_t{1} << 32)) throw std::runtime_error("checkpoint " + path + ": manifest too large");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) {
    throw std::runtime_error("checkpoint " + path + ": truncated manifest");
  }
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint " + path + ": bad manifest: " + e.what());
  }
  Checkpoint ckpt;
  ckpt.epoch = manifest.value("epoch", std::uint64_t{0});
  ckpt.config = manifest.value("config", json::object());
  ckpt.extra = manifest.value("extra", json::object());
  for (const auto& e : manifest.at("entries")) {
    const auto key = e.at("key").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    Tensor t = read_tensor(in);
    if (t.shape() != shape) {
      throw std::runtime_error("checkpoint " + path + ": entry " + key + " has shape " + shape_str(t.shape()) +
                               ", manifest says " + shape_str(shape));
    }
    ckpt.tensors.emplace(key, std::move(t));
  }
  return ckpt;
}

}  // namespace mxa::model
