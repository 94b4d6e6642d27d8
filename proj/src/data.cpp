#include "mxa/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <set>
#include <sstream>

namespace mxa::data {

namespace fs = std::filesystem;
using nlohmann::json;

void write_pgm(const fs::path& path, const GrayImage& img) {
  if (img.pixels.size() != img.width * img.height) throw std::invalid_argument("write_pgm: pixel count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string pgm_token(std::istream& in, const fs::path& path) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw IoError(path.string() + ": truncated PGM header");
  return tok;
}

std::size_t pgm_number(std::istream& in, const fs::path& path) {
  const auto tok = pgm_token(in, path);
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char ch) { return ch >= '0' && ch <= '9'; }))
    throw IoError(path.string() + ": bad PGM header field '" + tok + "'");
  return std::stoul(tok);
}

}  // namespace

GrayImage read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  if (pgm_token(in, path) != "P5") throw IoError(path.string() + ": not a binary PGM (P5)");
  GrayImage img;
  img.width = pgm_number(in, path);
  img.height = pgm_number(in, path);
  if (pgm_number(in, path) != 255) throw IoError(path.string() + ": only maxval 255 is supported");
  // pgm_token consumed exactly one whitespace byte after maxval.
  img.pixels.resize(img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.pixels.size()) throw IoError(path.string() + ": truncated pixel data");
  return img;
}

Tensor Dataset::targets() const { return kd::label_matrix(rows); }

std::pair<Tensor, Tensor> Dataset::batch(std::span<const std::size_t> index) const {
  const std::size_t S = images.dim(2), plane = S * S;
  std::vector<double> x(index.size() * plane);
  std::vector<kd::RawLabelRow> r;
  const auto src = images.values();
  for (std::size_t b = 0; b < index.size(); ++b) {
    if (index[b] >= size()) throw std::out_of_range("dataset batch: index out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(index[b] * plane), plane,
                x.begin() + static_cast<std::ptrdiff_t>(b * plane));
    r.push_back(rows[index[b]]);
  }
  return {Tensor(Shape{index.size(), 1, S, S}, std::move(x)), kd::label_matrix(r)};
}

Dataset load_dataset(const fs::path& root) {
  const auto csv = root / "labels.csv";
  std::ifstream in(csv);
  if (!in) throw IoError("cannot open " + csv.string());
  kd::LabelTable table;
  try {
    table = kd::read_label_csv(in);
  } catch (const std::invalid_argument&) {
    throw;
  } catch (const std::runtime_error& e) {
    throw IoError(csv.string() + ": " + e.what());
  }
  Dataset ds;
  ds.ids = std::move(table.paths);
  ds.rows = std::move(table.rows);
  std::size_t S = 0;
  std::vector<double> pixels;
  for (const auto& id : ds.ids) {
    const auto img = read_pgm(root / id);
    if (img.width != img.height) throw IoError((root / id).string() + ": image is not square");
    if (S == 0) S = img.width;
    if (img.width != S) {
      throw IoError((root / id).string() + ": size " + std::to_string(img.width) + " differs from " +
                    std::to_string(S));
    }
    for (auto p : img.pixels) pixels.push_back(p / 255.0);
  }
  if (!ds.ids.empty()) ds.images = Tensor(Shape{ds.ids.size(), 1, S, S}, std::move(pixels));
  return ds;
}

void write_dataset(const fs::path& root, const Dataset& ds) {
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
  const std::size_t S = ds.size() ? ds.images.dim(2) : 0;
  const auto v = ds.size() ? ds.images.values() : std::span<const double>{};
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto path = root / ds.ids[i];
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
    GrayImage img{S, S, std::vector<std::uint8_t>(S * S)};
    for (std::size_t k = 0; k < S * S; ++k)
      img.pixels[k] = static_cast<std::uint8_t>(std::lround(std::clamp(v[i * S * S + k], 0.0, 1.0) * 255.0));
    write_pgm(path, img);
  }
  const auto csv = root / "labels.csv";
  std::ofstream out(csv);
  if (!out) throw IoError("cannot write " + csv.string());
  kd::write_label_csv(out, kd::LabelTable{ds.ids, ds.rows});
  if (!out) throw IoError("write failed for " + csv.string());
}

// ---------------------------------------------------------------------------

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("synthetic spec: " + what); };
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (image_size == 0) fail("image_size must be positive");
  if (!(noise_sigma >= 0.0)) fail("noise_sigma must be >= 0");
  if (!prob(uncertain_fraction)) fail("uncertain_fraction must lie in [0, 1]");
  if (!prob(blank_fraction)) fail("blank_fraction must lie in [0, 1]");
  for (std::size_t k = 0; k < kd::kNumLabels; ++k) {
    const auto& s = signals[k];
    const auto name = std::string(kd::label_abbrevs()[k]);
    if (!std::isfinite(s.intensity)) fail(name + ": intensity must be finite");
    if (s.kind == Signal::Kind::Rectangle) {
      const auto& r = s.rect;
      if (!(0.0 <= r[0] && r[0] < r[2] && r[2] <= 1.0 && 0.0 <= r[1] && r[1] < r[3] && r[3] <= 1.0))
        fail(name + ": rectangle must satisfy 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1");
    }
    for (std::size_t j = 0; j < kd::kNumLabels; ++j)
      if (!prob(cooccurrence[k][j])) fail("cooccurrence entries must lie in [0, 1]");
  }
}

std::array<double, kd::kNumLabels> SyntheticSpec::marginals() const {
  std::array<double, kd::kNumLabels> m{};
  for (std::size_t j = 0; j < kd::kNumLabels; ++j) {
    double off = 1.0 - cooccurrence[j][j];
    for (std::size_t i = 0; i < kd::kNumLabels; ++i)
      if (i != j) off *= 1.0 - cooccurrence[i][i] * cooccurrence[i][j];
    m[j] = 1.0 - off;
  }
  return m;
}

namespace {

const char* kind_name(Signal::Kind k) { return k == Signal::Kind::Rectangle ? "rectangle" : "brightness"; }

std::size_t label_by_abbrev(const std::string& a) {
  for (std::size_t k = 0; k < kd::kNumLabels; ++k)
    if (kd::label_abbrevs()[k] == a) return k;
  throw std::invalid_argument("synthetic spec: unknown label \"" + a + "\"");
}

}  // namespace

json SyntheticSpec::to_json() const {
  json sig = json::object();
  for (std::size_t k = 0; k < kd::kNumLabels; ++k) {
    const auto& s = signals[k];
    json e{{"kind", kind_name(s.kind)}, {"intensity", s.intensity}};
    if (s.kind == Signal::Kind::Rectangle) e["rect"] = s.rect;
    sig[std::string(kd::label_abbrevs()[k])] = e;
  }
  return json{{"image_size", image_size},
              {"background", background},
              {"noise_sigma", noise_sigma},
              {"uncertain_fraction", uncertain_fraction},
              {"blank_fraction", blank_fraction},
              {"labels", kd::label_abbrevs()},
              {"signals", sig},
              {"cooccurrence", cooccurrence}};
}

SyntheticSpec SyntheticSpec::from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("synthetic spec: expected an object");
  static const std::set<std::string> known = {"image_size",     "background", "noise_sigma", "uncertain_fraction",
                                              "blank_fraction", "labels",     "signals",     "cooccurrence"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw std::invalid_argument("synthetic spec: unknown key \"" + key + "\"");
  SyntheticSpec s = default_spec();
  try {
    if (j.contains("image_size")) s.image_size = j["image_size"].get<std::size_t>();
    if (j.contains("background")) s.background = j["background"].get<double>();
    if (j.contains("noise_sigma")) s.noise_sigma = j["noise_sigma"].get<double>();
    if (j.contains("uncertain_fraction")) s.uncertain_fraction = j["uncertain_fraction"].get<double>();
    if (j.contains("blank_fraction")) s.blank_fraction = j["blank_fraction"].get<double>();
    if (j.contains("labels") && j["labels"] != json(kd::label_abbrevs()))
      throw std::invalid_argument("synthetic spec: \"labels\" must list the 14 abbreviations in order");
    if (j.contains("signals")) {
      for (const auto& [name, e] : j["signals"].items()) {
        auto& sig = s.signals[label_by_abbrev(name)];
        for (const auto& [key, _] : e.items())
          if (key != "kind" && key != "intensity" && key != "rect")
            throw std::invalid_argument("synthetic spec: signal " + name + ": unknown key \"" + key + "\"");
        if (e.contains("kind")) {
          const auto kind = e["kind"].get<std::string>();
          if (kind == "rectangle") sig.kind = Signal::Kind::Rectangle;
          else if (kind == "brightness") sig.kind = Signal::Kind::Brightness;
          else throw std::invalid_argument("synthetic spec: signal " + name + ": unknown kind \"" + kind + "\"");
        }
        if (e.contains("intensity")) sig.intensity = e["intensity"].get<double>();
        if (e.contains("rect")) sig.rect = e["rect"].get<std::array<double, 4>>();
      }
    }
    if (j.contains("cooccurrence")) {
      s.cooccurrence = j["cooccurrence"].get<std::array<std::array<double, kd::kNumLabels>, kd::kNumLabels>>();
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

SyntheticSpec SyntheticSpec::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  return from_json(j);
}

SyntheticSpec default_spec() {
  using kd::Label;
  SyntheticSpec s;
  // A 4x4 lattice of 10-pixel squares (at 64 px); LO uses brightness instead.
  constexpr double side = 0.16;
  std::size_t cell = 0;
  for (std::size_t k = 0; k < kd::kNumLabels; ++k) {
    auto& sig = s.signals[k];
    if (k == kd::kLungOpacity) {
      sig.kind = Signal::Kind::Brightness;
      sig.intensity = 0.12;
      continue;
    }
    const double cx = 0.125 + 0.25 * static_cast<double>(cell % 4);
    const double cy = 0.125 + 0.25 * static_cast<double>(cell / 4);
    ++cell;
    sig.kind = Signal::Kind::Rectangle;
    sig.rect = {cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2};
    sig.intensity = 0.35;
  }
  const std::array<double, kd::kNumLabels> prevalence{0.30, 0.15, 0.20, 0.20, 0.15, 0.20, 0.15,
                                                      0.15, 0.25, 0.15, 0.25, 0.10, 0.10, 0.30};
  for (std::size_t k = 0; k < kd::kNumLabels; ++k) s.cooccurrence[k][k] = prevalence[k];
  s.cooccurrence[kd::kConsolidation][kd::kLungOpacity] = 0.6;
  s.cooccurrence[kd::kEdema][kd::kCardiomegaly] = 0.4;
  s.cooccurrence[kd::kPneumonia][kd::kConsolidation] = 0.3;
  return s;
}

namespace {

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t index, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

}  // namespace

Dataset synth_dataset(const SyntheticSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  constexpr std::size_t L = kd::kNumLabels;
  const std::size_t S = spec.image_size;
  Dataset ds;
  std::vector<double> pixels(n * S * S);
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = sample_rng(seed, i, 0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);

    std::array<bool, L> base{}, on{};
    for (std::size_t k = 0; k < L; ++k) base[k] = on[k] = u(rng) < spec.cooccurrence[k][k];
    for (std::size_t a = 0; a < L; ++a) {
      if (!base[a]) continue;
      for (std::size_t b = 0; b < L; ++b)
        if (b != a && spec.cooccurrence[a][b] > 0.0 && u(rng) < spec.cooccurrence[a][b]) on[b] = true;
    }
    kd::RawLabelRow row{};
    for (std::size_t k = 0; k < L; ++k) {
      if (on[k]) row[k] = u(rng) < spec.uncertain_fraction ? kd::RawLabel::Uncertain : kd::RawLabel::Positive;
      else row[k] = u(rng) < spec.blank_fraction ? kd::RawLabel::Blank : kd::RawLabel::Negative;
    }

    double* img = pixels.data() + i * S * S;
    std::fill(img, img + S * S, spec.background);
    for (std::size_t k = 0; k < L; ++k) {
      if (!on[k]) continue;
      const auto& sig = spec.signals[k];
      if (sig.kind == Signal::Kind::Brightness) {
        for (std::size_t p = 0; p < S * S; ++p) img[p] += sig.intensity;
        continue;
      }
      auto px = [S](double t) { return static_cast<std::size_t>(std::lround(t * static_cast<double>(S))); };
      for (std::size_t y = px(sig.rect[1]); y < px(sig.rect[3]); ++y)
        for (std::size_t x = px(sig.rect[0]); x < px(sig.rect[2]); ++x) img[y * S + x] += sig.intensity;
    }
    for (std::size_t p = 0; p < S * S; ++p) {
      const double v = std::clamp(img[p] + spec.noise_sigma * noise(rng), 0.0, 1.0);
      img[p] = std::round(v * 255.0) / 255.0;  // what a PGM round trip yields
    }

    std::ostringstream id;
    id << "images/s" << std::setw(6) << std::setfill('0') << i << ".pgm";
    ds.ids.push_back(id.str());
    ds.rows.push_back(row);
  }
  if (n) ds.images = Tensor(Shape{n, 1, S, S}, std::move(pixels));
  return ds;
}

kd::TeacherLogitTable synth_teacher_logits(const Dataset& ds, const kd::TeacherAdapterSpec& map,
                                           const TeacherNoise& noise, std::uint64_t seed) {
  constexpr std::size_t T = kd::kNumTeacherLogits;
  std::array<std::ptrdiff_t, T> student_of{};
  student_of.fill(-1);
  for (std::size_t k = 0; k < kd::kNumLabels; ++k) {
    const auto& slot = map.slots()[k];
    if (slot.kind == kd::TeacherSlot::Kind::Teacher) student_of[slot.teacher_index] = static_cast<std::ptrdiff_t>(k);
  }
  kd::TeacherLogitTable t;
  t.ids = ds.ids;
  std::vector<double> v(ds.size() * T);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto rng = sample_rng(seed, i, 1);
    std::normal_distribution<double> gauss(0.0, noise.sigma);
    const auto y = kd::u1_map(ds.rows[i]);
    for (std::size_t o = 0; o < T; ++o) {
      const bool positive = student_of[o] >= 0 && y[static_cast<std::size_t>(student_of[o])] == 1.0;
      v[i * T + o] = (positive ? noise.margin : -noise.margin) + gauss(rng);
    }
  }
  if (ds.size()) t.logits = Tensor(Shape{ds.size(), T}, std::move(v));
  return t;
}

Tensor align_teacher(const kd::TeacherLogitTable& table, const Dataset& ds) {
  constexpr std::size_t T = kd::kNumTeacherLogits;
  std::map<std::string, std::size_t> row_of;
  for (std::size_t r = 0; r < table.ids.size(); ++r)
    if (!row_of.emplace(table.ids[r], r).second)
      throw std::invalid_argument("teacher logits: duplicate sample id \"" + table.ids[r] + "\"");
  std::vector<double> v(ds.size() * T);
  const auto src = table.logits.values();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto it = row_of.find(ds.ids[i]);
    if (it == row_of.end()) throw std::invalid_argument("teacher logits: no row for sample \"" + ds.ids[i] + "\"");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(it->second * T), T,
                v.begin() + static_cast<std::ptrdiff_t>(i * T));
  }
  return Tensor(Shape{ds.size(), T}, std::move(v));
}

}  // namespace mxa::data
