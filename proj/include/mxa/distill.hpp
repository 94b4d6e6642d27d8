#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mxa/tensor.hpp"

namespace mxa::kd {

inline constexpr std::size_t kNumLabels = 14;
inline constexpr std::size_t kNumTeacherLogits = 18;

// Student label order, as in the CheXpert CSV.
enum Label : std::size_t {
  kNoFinding, kEnlargedCardiomediastinum, kCardiomegaly, kLungOpacity, kLungLesion, kEdema, kConsolidation,
  kPneumonia, kAtelectasis, kPneumothorax, kPleuralEffusion, kPleuralOther, kFracture, kSupportDevices
};

const std::array<std::string_view, kNumLabels>& label_names();    // CSV column names
const std::array<std::string_view, kNumLabels>& label_abbrevs();  // NF, ECM, ...
const std::array<std::string_view, kNumTeacherLogits>& teacher_label_names();

enum class RawLabel { Negative, Positive, Uncertain, Blank };
using RawLabelRow = std::array<RawLabel, kNumLabels>;

// Accepts "1", "0", "-1" (optionally with ".0") and the empty cell.
RawLabel parse_raw_label(std::string_view cell, std::string_view row_id);
std::string_view raw_label_text(RawLabel v);

// Uncertain counts as positive, blank as negative.
std::array<double, kNumLabels> u1_map(const RawLabelRow& row);
Tensor label_matrix(std::span<const RawLabelRow> rows);  // [B, 14]

// Batch mean of the class-summed binary cross entropy, from logits. Targets
// may be soft. The target tensor receives no gradient.
Tensor bcewl(const Tensor& logits, const Tensor& targets);

struct TeacherSlot {
  enum class Kind { Teacher, SynthesizeNoFinding, Zero };
  Kind kind = Kind::Zero;
  std::size_t teacher_index = 0;
};

// Student slot -> teacher logit / synthesized No Finding / zero.
class TeacherAdapterSpec {
 public:
  explicit TeacherAdapterSpec(std::array<TeacherSlot, kNumLabels> slots);

  // {"map": {"0": "SYNTHESIZE_NF", "1": 17, ..., "11": "ZERO"}}
  static TeacherAdapterSpec from_json(std::string_view text);
  static TeacherAdapterSpec load(const std::string& path);
  // Teacher order follows the usual 18-way chest X-ray classifier output.
  static TeacherAdapterSpec chex_default();
  std::string to_json() const;

  const std::array<TeacherSlot, kNumLabels>& slots() const { return slots_; }
  // False for zero slots: they carry no teacher signal.
  std::array<bool, kNumLabels> active() const;

 private:
  std::array<TeacherSlot, kNumLabels> slots_;
};

inline constexpr double kNoFindingLogitClamp = 30.0;

struct AdaptStats {
  std::size_t clamped = 0;
};

// Teacher logits [B, 18] -> student-order logits [B, 14]. Not differentiable;
// the teacher is frozen.
Tensor adapt_teacher(const Tensor& teacher_logits, const TeacherAdapterSpec& spec, AdaptStats* stats = nullptr);

// w_j = 1 - mean_i p_ij, forced to 0 where `active` is false.
std::vector<double> dynamic_weights(const Tensor& teacher_probs, std::span<const bool> active = {});

// sum_ij w_j * bce(o_ij, p_ij) / (B * C).
Tensor kd_soft_loss(const Tensor& student_logits, const Tensor& teacher_probs, std::span<const double> weights);

struct LossConfig {
  double alpha = 0.5;
  double temperature = 1.0;

  void validate() const;
};

struct LossTerms {
  Tensor total;
  Tensor bce;
  Tensor kd;  // undefined when alpha == 0 and no teacher is given
};

// (1 - alpha) * bcewl(o, Y) + alpha * kd. The temperature divides the student
// logits and the teacher logits inside the distillation term only. With
// alpha == 0 the teacher may be undefined.
LossTerms loss_terms(const Tensor& student_logits, const Tensor& targets, const Tensor& teacher_probs,
                     std::span<const double> weights, const LossConfig& cfg);
Tensor total_loss(const Tensor& student_logits, const Tensor& targets, const Tensor& teacher_probs,
                  std::span<const double> weights, const LossConfig& cfg);

struct LabelTable {
  std::vector<std::string> paths;
  std::vector<RawLabelRow> rows;
};

// CheXpert-style CSV: a Path column plus the 14 label columns; other columns
// are ignored.
LabelTable read_label_csv(std::istream& in);
LabelTable read_label_csv(const std::string& path);
void write_label_csv(std::ostream& out, const LabelTable& table);

struct TeacherLogitTable {
  std::vector<std::string> ids;
  Tensor logits;  // [N, 18]
};

// Header: sample_id,o0,...,o17
TeacherLogitTable read_teacher_csv(std::istream& in);
TeacherLogitTable read_teacher_csv(const std::string& path);
void write_teacher_csv(std::ostream& out, const TeacherLogitTable& table);

// Header: sample_id,a0,...,a13 (student label order).
void write_adapted_csv(std::ostream& out, const std::vector<std::string>& ids, const Tensor& adapted);

}  // namespace mxa::kd
