#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mxa/distill.hpp"
#include "mxa/tensor.hpp"

namespace mxa::data {

// Thrown for unreadable or malformed files; the message names the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

// Binary 8-bit PGM (P5), maxval 255.
void write_pgm(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_pgm(const std::filesystem::path& path);

struct Dataset {
  std::vector<std::string> ids;  // the CSV Path column, relative to the dataset root
  Tensor images;                 // [N, 1, S, S], pixel / 255; undefined when empty
  std::vector<kd::RawLabelRow> rows;

  std::size_t size() const { return ids.size(); }
  Tensor targets() const;  // U-1 mapped [N, 14]
  // Rows `index` as a batch: images [B,1,S,S], targets [B,14].
  std::pair<Tensor, Tensor> batch(std::span<const std::size_t> index) const;
};

// <root>/labels.csv plus one PGM per row. Images must be square and of equal size.
Dataset load_dataset(const std::filesystem::path& root);
// Writes <root>/labels.csv and <root>/<id> for every sample.
void write_dataset(const std::filesystem::path& root, const Dataset& ds);

// Planted-signal generator standing in for real radiographs.
struct Signal {
  enum class Kind { Rectangle, Brightness };
  Kind kind = Kind::Rectangle;
  std::array<double, 4> rect{0, 0, 0, 0};  // normalized x1, y1, x2, y2
  double intensity = 0.0;                  // added to pixels inside the rectangle, or everywhere
};

struct SyntheticSpec {
  std::size_t image_size = 64;
  double background = 0.3;
  double noise_sigma = 0.1;         // per-pixel Gaussian noise
  double uncertain_fraction = 0.1;  // positives written as -1
  double blank_fraction = 0.3;      // negatives written as an empty cell
  std::array<Signal, kd::kNumLabels> signals{};
  // Diagonal: base prevalence, drawn independently. Off-diagonal [i][j]:
  // probability that a base-positive i also turns j on.
  std::array<std::array<double, kd::kNumLabels>, kd::kNumLabels> cooccurrence{};

  void validate() const;
  // Exact per-label positive rate implied by the matrix.
  std::array<double, kd::kNumLabels> marginals() const;

  nlohmann::json to_json() const;
  // Missing keys keep the defaults of default_spec(); unknown keys are errors.
  static SyntheticSpec from_json(const nlohmann::json& j);
  static SyntheticSpec load(const std::filesystem::path& path);
};

// Thirteen labels as same-sized rectangles at distinct fixed positions, Lung
// Opacity as a global brightness shift, plus a few co-occurrence links.
SyntheticSpec default_spec();

// Deterministic per (spec, seed); sample i depends only on (seed, i).
Dataset synth_dataset(const SyntheticSpec& spec, std::size_t n, std::uint64_t seed);

struct TeacherNoise {
  double margin = 2.0;  // |mean logit| for mapped slots
  double sigma = 1.0;
};

// 18-way logits for the planted ground truth: mapped slots get +-margin plus
// Gaussian noise, unmapped ones -margin plus noise.
kd::TeacherLogitTable synth_teacher_logits(const Dataset& ds, const kd::TeacherAdapterSpec& map,
                                           const TeacherNoise& noise, std::uint64_t seed);

// Teacher rows reordered to follow ds.ids; every id must be present exactly once.
Tensor align_teacher(const kd::TeacherLogitTable& table, const Dataset& ds);

}  // namespace mxa::data
