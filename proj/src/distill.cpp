#include "mxa/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "mxa/csv.hpp"
#include "mxa/ops.hpp"

namespace mxa::kd {

using nlohmann::json;

const std::array<std::string_view, kNumLabels>& label_names() {
  static const std::array<std::string_view, kNumLabels> names = {
      "No Finding", "Enlarged Cardiomediastinum", "Cardiomegaly", "Lung Opacity", "Lung Lesion",
      "Edema",      "Consolidation",              "Pneumonia",    "Atelectasis",  "Pneumothorax",
      "Pleural Effusion", "Pleural Other",      "Fracture",     "Support Devices"};
  return names;
}

const std::array<std::string_view, kNumLabels>& label_abbrevs() {
  static const std::array<std::string_view, kNumLabels> names = {"NF",  "ECM", "CM",  "LO", "LL", "ED", "CON",
                                                                  "PNA", "ATL", "PTX", "PE", "PO", "FX", "SD"};
  return names;
}

const std::array<std::string_view, kNumTeacherLogits>& teacher_label_names() {
  static const std::array<std::string_view, kNumTeacherLogits> names = {
      "Atelectasis", "Consolidation", "Infiltration", "Pneumothorax",  "Edema",       "Emphysema",
      "Fibrosis",    "Effusion",      "Pneumonia",    "Pleural_Thickening", "Cardiomegaly", "Nodule",
      "Mass",        "Hernia",        "Lung Lesion",  "Fracture",      "Lung Opacity", "Enlarged Cardiomediastinum"};
  return names;
}

RawLabel parse_raw_label(std::string_view cell, std::string_view row_id) {
  while (!cell.empty() && cell.front() == ' ') cell.remove_prefix(1);
  while (!cell.empty() && cell.back() == ' ') cell.remove_suffix(1);
  if (cell.empty()) return RawLabel::Blank;
  if (cell == "1" || cell == "1.0") return RawLabel::Positive;
  if (cell == "0" || cell == "0.0") return RawLabel::Negative;
  if (cell == "-1" || cell == "-1.0") return RawLabel::Uncertain;
  throw std::invalid_argument("label row " + std::string(row_id) + ": unknown label value '" + std::string(cell) +
                              "'");
}

std::string_view raw_label_text(RawLabel v) {
  switch (v) {
    case RawLabel::Positive: return "1.0";
    case RawLabel::Negative: return "0.0";
    case RawLabel::Uncertain: return "-1.0";
    case RawLabel::Blank: return "";
  }
  return "";
}

std::array<double, kNumLabels> u1_map(const RawLabelRow& row) {
  std::array<double, kNumLabels> y{};
  for (std::size_t k = 0; k < kNumLabels; ++k)
    y[k] = (row[k] == RawLabel::Positive || row[k] == RawLabel::Uncertain) ? 1.0 : 0.0;
  return y;
}

Tensor label_matrix(std::span<const RawLabelRow> rows) {
  std::vector<double> v;
  v.reserve(rows.size() * kNumLabels);
  for (const auto& r : rows) {
    const auto y = u1_map(r);
    v.insert(v.end(), y.begin(), y.end());
  }
  return Tensor(Shape{rows.size(), kNumLabels}, std::move(v));
}

namespace {

void require_finite(const Tensor& t, const char* what) {
  for (double v : t.values())
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite logit");
}

void require_pair(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rank() != 2 || a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

// max(o,0) - o*y + log(1 + exp(-|o|))
double bce_term(double o, double y) { return std::max(o, 0.0) - o * y + std::log1p(std::exp(-std::abs(o))); }

// sum_ij c_j * bce(o_ij, y_ij) / denom, with gradient c_j (sigmoid(o) - y) / denom.
Tensor weighted_bce(const Tensor& o, const Tensor& y, std::vector<double> col_weight, double denom,
                    const char* name) {
  const std::size_t B = o.dim(0), C = o.dim(1);
  const auto ov = o.values();
  const auto yv = y.values();
  double total = 0.0;
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < C; ++j) {
      if (col_weight[j] == 0.0) continue;
      total += col_weight[j] * bce_term(ov[i * C + j], yv[i * C + j]);
    }
  Tensor result = Tensor::scalar(total / denom);
  detail::record(name, {o}, result, [o, y, result, w = std::move(col_weight), denom, B, C]() {
    const double g = result.grad()[0] / denom;
    const auto ov = o.values();
    const auto yv = y.values();
    auto go = o.mutable_grad();
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < C; ++j)
        go[i * C + j] += g * w[j] * (stable_sigmoid(ov[i * C + j]) - yv[i * C + j]);
  });
  return result;
}

}  // namespace

Tensor bcewl(const Tensor& logits, const Tensor& targets) {
  require_pair(logits, targets, "bcewl");
  require_finite(logits, "bcewl");
  return weighted_bce(logits, targets, std::vector<double>(logits.dim(1), 1.0),
                      static_cast<double>(logits.dim(0)), "bcewl");
}

TeacherAdapterSpec::TeacherAdapterSpec(std::array<TeacherSlot, kNumLabels> slots) : slots_(slots) {
  std::size_t nf = 0;
  std::set<std::size_t> used;
  for (std::size_t k = 0; k < kNumLabels; ++k) {
    const auto& s = slots_[k];
    if (s.kind == TeacherSlot::Kind::SynthesizeNoFinding) ++nf;
    if (s.kind != TeacherSlot::Kind::Teacher) continue;
    if (s.teacher_index >= kNumTeacherLogits) {
      throw std::invalid_argument("teacher map: student " + std::to_string(k) + " -> teacher index " +
                                  std::to_string(s.teacher_index) + " out of range");
    }
    if (!used.insert(s.teacher_index).second) {
      throw std::invalid_argument("teacher map: teacher index " + std::to_string(s.teacher_index) +
                                  " used more than once");
    }
  }
  if (nf != 1) {
    throw std::invalid_argument("teacher map: expected exactly one SYNTHESIZE_NF slot, found " + std::to_string(nf));
  }
}

TeacherAdapterSpec TeacherAdapterSpec::from_json(std::string_view text) {
  std::set<std::string> seen_keys;
  bool duplicate = false;
  std::string dup;
  // Duplicate keys would otherwise be silently collapsed by the parser.
  json::parser_callback_t cb = [&](int depth, json::parse_event_t event, json& parsed) {
    if (event == json::parse_event_t::key && depth == 2) {
      const auto key = parsed.get<std::string>();
      if (!seen_keys.insert(key).second) {
        duplicate = true;
        dup = key;
      }
    }
    return true;
  };
  json doc;
  try {
    doc = json::parse(text.begin(), text.end(), cb);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("teacher map: ") + e.what());
  }
  if (duplicate) throw std::invalid_argument("teacher map: student index \"" + dup + "\" listed twice");
  if (!doc.is_object() || !doc.contains("map") || !doc["map"].is_object()) {
    throw std::invalid_argument("teacher map: expected an object with a \"map\" object");
  }
  std::array<bool, kNumLabels> present{};
  std::array<TeacherSlot, kNumLabels> slots{};
  for (const auto& [key, value] : doc["map"].items()) {
    std::size_t k = 0;
    std::size_t consumed = 0;
    try {
      k = std::stoul(key, &consumed);
    } catch (const std::exception&) {
      consumed = 0;
    }
    if (consumed != key.size() || k >= kNumLabels) {
      throw std::invalid_argument("teacher map: bad student index \"" + key + "\"");
    }
    if (present[k]) throw std::invalid_argument("teacher map: student index " + std::to_string(k) + " listed twice");
    present[k] = true;
    if (value.is_string()) {
      const auto s = value.get<std::string>();
      if (s == "SYNTHESIZE_NF") {
        slots[k].kind = TeacherSlot::Kind::SynthesizeNoFinding;
      } else if (s == "ZERO") {
        slots[k].kind = TeacherSlot::Kind::Zero;
      } else {
        throw std::invalid_argument("teacher map: unknown sentinel \"" + s + "\" for student " + key);
      }
    } else if (value.is_number_unsigned()) {
      slots[k].kind = TeacherSlot::Kind::Teacher;
      slots[k].teacher_index = value.get<std::size_t>();
    } else {
      throw std::invalid_argument("teacher map: student " + key + " must map to a teacher index or sentinel");
    }
  }
  for (std::size_t k = 0; k < kNumLabels; ++k)
    if (!present[k]) throw std::invalid_argument("teacher map: student index " + std::to_string(k) + " missing");
  return TeacherAdapterSpec(slots);
}

TeacherAdapterSpec TeacherAdapterSpec::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open teacher map " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

TeacherAdapterSpec TeacherAdapterSpec::chex_default() {
  using K = TeacherSlot::Kind;
  auto t = [](std::size_t i) { return TeacherSlot{K::Teacher, i}; };
  return TeacherAdapterSpec({TeacherSlot{K::SynthesizeNoFinding, 0}, t(17), t(10), t(16), t(14), t(4), t(1), t(8),
                             t(0), t(3), t(7), TeacherSlot{K::Zero, 0}, t(15), TeacherSlot{K::Zero, 0}});
}

std::string TeacherAdapterSpec::to_json() const {
  json map = json::object();
  for (std::size_t k = 0; k < kNumLabels; ++k) {
    const auto& s = slots_[k];
    const auto key = std::to_string(k);
    switch (s.kind) {
      case TeacherSlot::Kind::Teacher: map[key] = s.teacher_index; break;
      case TeacherSlot::Kind::SynthesizeNoFinding: map[key] = "SYNTHESIZE_NF"; break;
      case TeacherSlot::Kind::Zero: map[key] = "ZERO"; break;
    }
  }
  return json{{"map", map}}.dump(2);
}

std::array<bool, kNumLabels> TeacherAdapterSpec::active() const {
  std::array<bool, kNumLabels> a{};
  for (std::size_t k = 0; k < kNumLabels; ++k) a[k] = slots_[k].kind != TeacherSlot::Kind::Zero;
  return a;
}

Tensor adapt_teacher(const Tensor& teacher_logits, const TeacherAdapterSpec& spec, AdaptStats* stats) {
  if (teacher_logits.rank() != 2 || teacher_logits.dim(1) != kNumTeacherLogits) {
    throw std::invalid_argument("adapt_teacher: expected [B,18] logits, got " + shape_str(teacher_logits.shape()));
  }
  require_finite(teacher_logits, "adapt_teacher");
  const std::size_t B = teacher_logits.dim(0);
  const auto o = teacher_logits.values();
  std::vector<double> out(B * kNumLabels, 0.0);
  std::size_t clamped = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = o.data() + b * kNumTeacherLogits;
    for (std::size_t k = 0; k < kNumLabels; ++k) {
      const auto& s = spec.slots()[k];
      double& dst = out[b * kNumLabels + k];
      if (s.kind == TeacherSlot::Kind::Teacher) {
        dst = row[s.teacher_index];
      } else if (s.kind == TeacherSlot::Kind::SynthesizeNoFinding) {
        // log p = sum log(1 - sigmoid(o_i)) = -sum softplus(o_i)
        double log_p = 0.0;
        for (std::size_t i = 0; i < kNumTeacherLogits; ++i) log_p -= stable_softplus(row[i]);
        double logit = log_p - std::log(-std::expm1(log_p));
        if (!(logit <= kNoFindingLogitClamp) || logit < -kNoFindingLogitClamp) {
          logit = std::isnan(logit) || logit > 0 ? kNoFindingLogitClamp : -kNoFindingLogitClamp;
          ++clamped;
        }
        dst = logit;
      }
    }
  }
  if (stats) {
    stats->clamped += clamped;
  } else if (clamped > 0) {
    std::cerr << "warning: No Finding logit clamped to +-" << kNoFindingLogitClamp << " for " << clamped
              << " sample(s)\n";
  }
  return Tensor(Shape{B, kNumLabels}, std::move(out));
}

std::vector<double> dynamic_weights(const Tensor& teacher_probs, std::span<const bool> active) {
  if (teacher_probs.rank() != 2) {
    throw std::invalid_argument("dynamic_weights: expected [B,C], got " + shape_str(teacher_probs.shape()));
  }
  const std::size_t B = teacher_probs.dim(0), C = teacher_probs.dim(1);
  if (!active.empty() && active.size() != C) {
    throw std::invalid_argument("dynamic_weights: mask has " + std::to_string(active.size()) + " entries for " +
                                std::to_string(C) + " labels");
  }
  const auto p = teacher_probs.values();
  std::vector<double> w(C, 0.0);
  for (std::size_t j = 0; j < C; ++j) {
    if (!active.empty() && !active[j]) continue;
    double s = 0.0;
    for (std::size_t i = 0; i < B; ++i) s += p[i * C + j];
    w[j] = std::clamp(1.0 - s / static_cast<double>(B), 0.0, 1.0);
  }
  return w;
}

Tensor kd_soft_loss(const Tensor& student_logits, const Tensor& teacher_probs, std::span<const double> weights) {
  require_pair(student_logits, teacher_probs, "kd_soft_loss");
  require_finite(student_logits, "kd_soft_loss");
  const std::size_t B = student_logits.dim(0), C = student_logits.dim(1);
  if (weights.size() != C) {
    throw std::invalid_argument("kd_soft_loss: " + std::to_string(weights.size()) + " weights for " +
                                std::to_string(C) + " labels");
  }
  return weighted_bce(student_logits, teacher_probs, std::vector<double>(weights.begin(), weights.end()),
                      static_cast<double>(B * C), "kd_soft_loss");
}

void LossConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("loss: alpha must lie in [0,1]");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("loss: temperature must be positive");
  }
}

namespace {

// sigmoid(logit(p) / tau), exact at p in {0, 1}.
Tensor soften(const Tensor& probs, double tau) {
  std::vector<double> v(probs.numel());
  const auto p = probs.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (p[i] <= 0.0 || p[i] >= 1.0) {
      v[i] = p[i] <= 0.0 ? 0.0 : 1.0;
      continue;
    }
    v[i] = stable_sigmoid((std::log(p[i]) - std::log1p(-p[i])) / tau);
  }
  return Tensor(probs.shape(), std::move(v));
}

}  // namespace

LossTerms loss_terms(const Tensor& student_logits, const Tensor& targets, const Tensor& teacher_probs,
                     std::span<const double> weights, const LossConfig& cfg) {
  cfg.validate();
  LossTerms t;
  t.bce = bcewl(student_logits, targets);
  if (teacher_probs.defined()) {
    if (cfg.temperature == 1.0) {
      t.kd = kd_soft_loss(student_logits, teacher_probs, weights);
    } else {
      t.kd = kd_soft_loss(scale(student_logits, 1.0 / cfg.temperature), soften(teacher_probs, cfg.temperature),
                          weights);
    }
  } else if (cfg.alpha != 0.0) {
    throw std::invalid_argument("loss: alpha > 0 requires teacher probabilities");
  }
  if (cfg.alpha == 0.0) {
    t.total = t.bce;
  } else if (cfg.alpha == 1.0) {
    t.total = t.kd;
  } else {
    t.total = add(scale(t.bce, 1.0 - cfg.alpha), scale(t.kd, cfg.alpha));
  }
  return t;
}

Tensor total_loss(const Tensor& student_logits, const Tensor& targets, const Tensor& teacher_probs,
                  std::span<const double> weights, const LossConfig& cfg) {
  return loss_terms(student_logits, targets, teacher_probs, weights, cfg).total;
}

LabelTable read_label_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("label csv: empty input");
  const auto header = io::parse_csv_line(line);
  const auto path_col = io::column_index(header, "Path");
  if (path_col < 0) throw std::runtime_error("label csv: missing Path column");
  std::array<std::ptrdiff_t, kNumLabels> cols{};
  for (std::size_t k = 0; k < kNumLabels; ++k) {
    cols[k] = io::column_index(header, label_names()[k]);
    if (cols[k] < 0) throw std::runtime_error("label csv: missing column " + std::string(label_names()[k]));
  }
  LabelTable table;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = io::parse_csv_line(line);
    if (cells.size() != header.size()) {
      throw std::runtime_error("label csv line " + std::to_string(line_no) + ": expected " +
                               std::to_string(header.size()) + " cells, got " + std::to_string(cells.size()));
    }
    const std::string& id = cells[static_cast<std::size_t>(path_col)];
    RawLabelRow row{};
    for (std::size_t k = 0; k < kNumLabels; ++k)
      row[k] = parse_raw_label(cells[static_cast<std::size_t>(cols[k])], id);
    table.paths.push_back(id);
    table.rows.push_back(row);
  }
  return table;
}

LabelTable read_label_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open label csv " + path);
  return read_label_csv(in);
}

void write_label_csv(std::ostream& out, const LabelTable& table) {
  out << "Path";
  for (auto n : label_names()) out << ',' << n;
  out << '\n';
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    out << io::csv_field(table.paths[i]);
    for (auto v : table.rows[i]) out << ',' << raw_label_text(v);
    out << '\n';
  }
}

TeacherLogitTable read_teacher_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("teacher csv: empty input");
  const auto header = io::parse_csv_line(line);
  if (header.size() != kNumTeacherLogits + 1 || header[0] != "sample_id") {
    throw std::runtime_error("teacher csv: expected header sample_id,o0..o17");
  }
  for (std::size_t i = 0; i < kNumTeacherLogits; ++i)
    if (header[i + 1] != "o" + std::to_string(i)) throw std::runtime_error("teacher csv: bad column " + header[i + 1]);
  TeacherLogitTable table;
  std::vector<double> v;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = io::parse_csv_line(line);
    if (cells.size() != kNumTeacherLogits + 1) {
      throw std::runtime_error("teacher csv line " + std::to_string(line_no) + ": expected 19 cells");
    }
    table.ids.push_back(cells[0]);
    for (std::size_t i = 1; i < cells.size(); ++i) {
      std::size_t used = 0;
      double x = 0.0;
      try {
        x = std::stod(cells[i], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != cells[i].size()) {
        throw std::runtime_error("teacher csv line " + std::to_string(line_no) + ": bad number '" + cells[i] + "'");
      }
      v.push_back(x);
    }
  }
  table.logits = Tensor(Shape{table.ids.size(), kNumTeacherLogits}, std::move(v));
  return table;
}

TeacherLogitTable read_teacher_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open teacher csv " + path);
  return read_teacher_csv(in);
}

void write_teacher_csv(std::ostream& out, const TeacherLogitTable& table) {
  out << "sample_id";
  for (std::size_t i = 0; i < kNumTeacherLogits; ++i) out << ",o" << i;
  out << '\n';
  const auto v = table.logits.values();
  out << std::setprecision(17);
  for (std::size_t r = 0; r < table.ids.size(); ++r) {
    out << io::csv_field(table.ids[r]);
    for (std::size_t i = 0; i < kNumTeacherLogits; ++i) out << ',' << v[r * kNumTeacherLogits + i];
    out << '\n';
  }
}

void write_adapted_csv(std::ostream& out, const std::vector<std::string>& ids, const Tensor& adapted) {
  if (adapted.rank() != 2 || adapted.dim(1) != kNumLabels || adapted.dim(0) != ids.size()) {
    throw std::invalid_argument("write_adapted_csv: " + std::to_string(ids.size()) + " ids for logits " +
                                shape_str(adapted.shape()));
  }
  out << "sample_id";
  for (std::size_t k = 0; k < kNumLabels; ++k) out << ",a" << k;
  out << '\n';
  const auto v = adapted.values();
  out << std::setprecision(17);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    out << io::csv_field(ids[r]);
    for (std::size_t k = 0; k < kNumLabels; ++k) out << ',' << v[r * kNumLabels + k];
    out << '\n';
  }
}

}  // namespace mxa::kd
