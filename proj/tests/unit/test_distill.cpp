#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mxa/distill.hpp"
#include "mxa/gradcheck.hpp"
#include "mxa/ops.hpp"
#include "test_util.hpp"

using namespace mxa;
using namespace mxa::kd;
using mxa::testing::random_tensor;

namespace {

RawLabelRow filled(RawLabel v) {
  RawLabelRow r;
  r.fill(v);
  return r;
}

double naive_bce(double o, double y) {
  const double s = 1.0 / (1.0 + std::exp(-o));
  return -(y * std::log(s) + (1.0 - y) * std::log(1.0 - s));
}

double entropy(double p) { return -(p * std::log(p) + (1.0 - p) * std::log(1.0 - p)); }

Tensor probs_from(const Tensor& logits) {
  NoGradGuard guard;
  return sigmoid(logits.detach());
}

const GradCheckOptions tight{1e-5, 1e-8, std::nullopt, 0};

}  // namespace

TEST_CASE("uncertain labels count as positive") {
  RawLabelRow r = filled(RawLabel::Blank);
  r[0] = RawLabel::Positive;
  r[1] = RawLabel::Uncertain;
  r[2] = RawLabel::Negative;
  auto y = u1_map(r);
  CHECK(y[0] == 1.0);
  CHECK(y[1] == 1.0);
  CHECK(y[2] == 0.0);
  for (std::size_t k = 3; k < kNumLabels; ++k) CHECK(y[k] == 0.0);
  for (double v : u1_map(filled(RawLabel::Blank))) CHECK(v == 0.0);
  for (double v : u1_map(filled(RawLabel::Uncertain))) CHECK(v == 1.0);
  for (double v : u1_map(filled(RawLabel::Positive))) CHECK(v == 1.0);
  for (double v : u1_map(filled(RawLabel::Negative))) CHECK(v == 0.0);
}

TEST_CASE("raw label parsing") {
  CHECK(parse_raw_label("1.0", "r") == RawLabel::Positive);
  CHECK(parse_raw_label("1", "r") == RawLabel::Positive);
  CHECK(parse_raw_label("-1.0", "r") == RawLabel::Uncertain);
  CHECK(parse_raw_label("0", "r") == RawLabel::Negative);
  CHECK(parse_raw_label("", "r") == RawLabel::Blank);
  try {
    (void)parse_raw_label("2", "patient7/view1.jpg");
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("patient7/view1.jpg") != std::string::npos);
  }
}

TEST_CASE("bce with logits reference values") {
  CHECK(bcewl(Tensor({1, 1}, {0.0}), Tensor({1, 1}, {1.0})).item() == doctest::Approx(0.6931471805599453).epsilon(1e-15));
  const double pos = bcewl(Tensor({1, 1}, {40.0}), Tensor({1, 1}, {1.0})).item();
  const double neg = bcewl(Tensor({1, 1}, {-40.0}), Tensor({1, 1}, {0.0})).item();
  CHECK(pos >= 0.0);
  CHECK(pos < 1e-17);
  CHECK(neg == pos);
  // Far outside the range where exp overflows.
  CHECK(bcewl(Tensor({1, 1}, {-800.0}), Tensor({1, 1}, {1.0})).item() == 800.0);
  CHECK_THROWS_AS((void)bcewl(Tensor({1, 1}, {NAN}), Tensor({1, 1}, {1.0})), NumericError);
  CHECK_THROWS_AS((void)bcewl(Tensor({1, 1}, {INFINITY}), Tensor({1, 1}, {1.0})), NumericError);
  CHECK_THROWS_AS((void)bcewl(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), std::invalid_argument);
}

TEST_CASE("stable and naive bce agree on moderate logits") {
  std::mt19937_64 rng(1);
  Tensor o = random_tensor({6, 14}, rng, -20, 20, false);
  Tensor y = random_tensor({6, 14}, rng, 0, 1, false);
  double naive = 0.0;
  for (std::size_t i = 0; i < o.numel(); ++i) naive += naive_bce(o.value(i), y.value(i));
  naive /= 6.0;
  const double stable = bcewl(o, y).item();
  CHECK(std::abs(stable - naive) <= 1e-6);
  CHECK(stable >= 0.0);
}

TEST_CASE("bce gradient") {
  std::mt19937_64 rng(2);
  Tensor o = random_tensor({3, 14}, rng, -4, 4);
  Tensor y = label_matrix(std::vector<RawLabelRow>{filled(RawLabel::Positive), filled(RawLabel::Blank),
                                                   filled(RawLabel::Uncertain)});
  GradCheckOptions opt;
  opt.tolerance = 1e-6;
  auto report = gradient_check([&] { return bcewl(o, y); }, {o}, opt);
  CHECK_MESSAGE(report.passed, report.summary());
  // closed form (sigmoid(o) - y) / B
  Tape tape;
  o.zero_grad();
  {
    TapeScope scope(tape);
    tape.backward(bcewl(o, y));
  }
  for (std::size_t i = 0; i < o.numel(); ++i)
    CHECK(o.grad()[i] == doctest::Approx((stable_sigmoid(o.value(i)) - y.value(i)) / 3.0).epsilon(1e-14));
}

TEST_CASE("default teacher map") {
  auto spec = TeacherAdapterSpec::chex_default();
  const auto& s = spec.slots();
  CHECK(s[kNoFinding].kind == TeacherSlot::Kind::SynthesizeNoFinding);
  CHECK(s[kEnlargedCardiomediastinum].teacher_index == 17);
  CHECK(s[kPleuralOther].kind == TeacherSlot::Kind::Zero);
  CHECK(s[kSupportDevices].kind == TeacherSlot::Kind::Zero);
  // Every mapped slot names the same finding on both sides.
  const std::vector<std::pair<Label, std::string_view>> same = {
      {kCardiomegaly, "Cardiomegaly"}, {kLungOpacity, "Lung Opacity"}, {kLungLesion, "Lung Lesion"},
      {kEdema, "Edema"}, {kConsolidation, "Consolidation"}, {kPneumonia, "Pneumonia"},
      {kAtelectasis, "Atelectasis"}, {kPneumothorax, "Pneumothorax"}, {kPleuralEffusion, "Effusion"},
      {kFracture, "Fracture"}, {kEnlargedCardiomediastinum, "Enlarged Cardiomediastinum"}};
  for (const auto& [k, name] : same) {
    CHECK(s[k].kind == TeacherSlot::Kind::Teacher);
    CHECK(teacher_label_names()[s[k].teacher_index] == name);
  }
  auto round = TeacherAdapterSpec::from_json(spec.to_json());
  for (std::size_t k = 0; k < kNumLabels; ++k) {
    CHECK(round.slots()[k].kind == s[k].kind);
    CHECK(round.slots()[k].teacher_index == s[k].teacher_index);
  }
}

TEST_CASE("teacher map validation") {
  auto base = [](const std::string& override_entries) {
    std::string m = "{\"map\": {" + override_entries;
    return m + "}}";
  };
  const std::string rest =
      "\"1\": 17, \"2\": 10, \"3\": 16, \"4\": 14, \"5\": 4, \"6\": 1, \"7\": 8, \"8\": 0, \"9\": 3, "
      "\"10\": 7, \"11\": \"ZERO\", \"12\": 15, \"13\": \"ZERO\"";
  CHECK_NOTHROW(TeacherAdapterSpec::from_json(base("\"0\": \"SYNTHESIZE_NF\", " + rest)));
  // No synthesized slot.
  CHECK_THROWS_AS(TeacherAdapterSpec::from_json(base("\"0\": 2, " + rest)), std::invalid_argument);
  // Missing student index.
  CHECK_THROWS_AS(TeacherAdapterSpec::from_json(base(rest)), std::invalid_argument);
  // Duplicate key.
  CHECK_THROWS_AS(TeacherAdapterSpec::from_json(base("\"0\": \"SYNTHESIZE_NF\", \"1\": 17, " + rest)),
                  std::invalid_argument);
  CHECK_THROWS_AS(TeacherAdapterSpec::from_json(base("\"0\": \"SYNTHESIZE_NF\", \"01\": 5, " + rest)),
                  std::invalid_argument);
  // Teacher index reused.
  CHECK_THROWS_AS(TeacherAdapterSpec::from_json(base("\"0\": \"SYNTHESIZE_NF\", " +
                                                     std::string(rest).replace(rest.find("\"2\": 10"), 7, "\"2\": 17"))),
                  std::invalid_argument);
  // Out of range, unknown sentinel, wrong type.
  CHECK_THROWS_AS(TeacherAdapterSpec::from_json(base("\"0\": \"SYNTHESIZE_NF\", " +
                                                     std::string(rest).replace(rest.find("\"2\": 10"), 7, "\"2\": 18"))),
                  std::invalid_argument);
  CHECK_THROWS_AS(TeacherAdapterSpec::from_json(base("\"0\": \"NF\", " + rest)), std::invalid_argument);
  CHECK_THROWS_AS(TeacherAdapterSpec::from_json(base("\"0\": -1, " + rest)), std::invalid_argument);
  CHECK_THROWS_AS(TeacherAdapterSpec::from_json("{\"map\": [1,2]}"), std::invalid_argument);
  CHECK_THROWS_AS(TeacherAdapterSpec::from_json("{not json"), std::invalid_argument);
}

TEST_CASE("no finding synthesis from neutral teacher") {
  Tensor adapted = adapt_teacher(Tensor::zeros({1, 18}), TeacherAdapterSpec::chex_default());
  // p = 0.5^18 = 1/262144
  CHECK(adapted.value(kNoFinding) == doctest::Approx(-12.476645435374474).epsilon(1e-13));
  CHECK(stable_sigmoid(adapted.value(kNoFinding)) == doctest::Approx(1.0 / 262144.0).epsilon(1e-12));
}

TEST_CASE("mapped slots copy teacher logits exactly") {
  std::mt19937_64 rng(3);
  auto spec = TeacherAdapterSpec::chex_default();
  Tensor t = random_tensor({5, 18}, rng, -9, 9, false);
  Tensor a = adapt_teacher(t, spec);
  CHECK(a.shape() == Shape{5, 14});
  for (std::size_t b = 0; b < 5; ++b)
    for (std::size_t k = 0; k < kNumLabels; ++k) {
      const auto& s = spec.slots()[k];
      if (s.kind == TeacherSlot::Kind::Teacher) CHECK(a.value(b * 14 + k) == t.value(b * 18 + s.teacher_index));
      if (s.kind == TeacherSlot::Kind::Zero) CHECK(a.value(b * 14 + k) == 0.0);
    }
  CHECK_THROWS_AS((void)adapt_teacher(Tensor::zeros({2, 14}), spec), std::invalid_argument);
  CHECK_THROWS_AS((void)adapt_teacher(Tensor::full({1, 18}, NAN), spec), NumericError);
}

TEST_CASE("no finding probability falls as any teacher logit rises") {
  std::mt19937_64 rng(4);
  auto spec = TeacherAdapterSpec::chex_default();
  std::size_t checked = 0;
  for (int trial = 0; trial < 40; ++trial) {
    Tensor t = random_tensor({1, 18}, rng, -6, 3, false);
    const double base = adapt_teacher(t, spec).value(kNoFinding);
    for (std::size_t i = 0; i < 18; ++i) {
      for (double step : {1e-3, 0.5, 3.0}) {
        Tensor u({1, 18}, std::vector<double>(t.values().begin(), t.values().end()));
        u.mutable_values()[i] += step;
        CHECK(adapt_teacher(u, spec).value(kNoFinding) < base);
        ++checked;
      }
    }
  }
  CHECK(checked == 40 * 18 * 3);
}

TEST_CASE("no finding logit clamps at the extremes") {
  auto spec = TeacherAdapterSpec::chex_default();
  AdaptStats stats;
  Tensor lo = adapt_teacher(Tensor::full({2, 18}, -1000.0), spec, &stats);
  CHECK(lo.value(kNoFinding) == kNoFindingLogitClamp);
  CHECK(stats.clamped == 2);
  Tensor hi = adapt_teacher(Tensor::full({1, 18}, 1000.0), spec, &stats);
  CHECK(hi.value(kNoFinding) == -kNoFindingLogitClamp);
  CHECK(stats.clamped == 3);
  // Moderately confident negatives stay unclamped.
  Tensor mid = adapt_teacher(Tensor::full({1, 18}, -6.0), spec, &stats);
  CHECK(stats.clamped == 3);
  CHECK(mid.value(kNoFinding) > 0.0);
}

TEST_CASE("dynamic label weights") {
  CHECK(dynamic_weights(Tensor::full({4, 14}, 1.0))[3] == 0.0);
  CHECK(dynamic_weights(Tensor::full({4, 14}, 0.5))[3] == 0.5);
  Tensor col({3, 1}, {0.2, 0.4, 0.9});
  CHECK(dynamic_weights(col)[0] == doctest::Approx(0.5).epsilon(1e-15));
  auto active = TeacherAdapterSpec::chex_default().active();
  auto w = dynamic_weights(Tensor::full({2, 14}, 0.5), active);
  CHECK(w[kPleuralOther] == 0.0);
  CHECK(w[kSupportDevices] == 0.0);
  CHECK(w[kEdema] == 0.5);
  std::mt19937_64 rng(5);
  for (double v : dynamic_weights(random_tensor({8, 14}, rng, 0, 1, false))) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("distillation loss floor at matched probabilities") {
  std::mt19937_64 rng(6);
  Tensor o = random_tensor({4, 14}, rng, -3, 3, false);
  Tensor p = probs_from(o);
  std::vector<double> w(14);
  for (std::size_t j = 0; j < 14; ++j) w[j] = 0.05 * static_cast<double>(j);
  double floor = 0.0;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 14; ++j) floor += w[j] * entropy(p.value(i * 14 + j));
  floor /= 4.0 * 14.0;
  const double loss = kd_soft_loss(o, p, w).item();
  CHECK(loss == doctest::Approx(floor).epsilon(1e-12));
  CHECK(loss > 0.0);

  // p = 0.5 and w = 0.5 everywhere: the floor is ln2 / 2.
  CHECK(kd_soft_loss(Tensor::zeros({3, 14}), Tensor::full({3, 14}, 0.5), std::vector<double>(14, 0.5)).item() ==
        doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-14));
  CHECK(kd_soft_loss(o, Tensor::full({4, 14}, 0.9), std::vector<double>(14, 0.0)).item() == 0.0);
}

TEST_CASE("distillation loss gradient") {
  std::mt19937_64 rng(7);
  Tensor o = random_tensor({3, 14}, rng, -3, 3);
  Tensor p = random_tensor({3, 14}, rng, 0, 1, false);
  auto w = dynamic_weights(p, TeacherAdapterSpec::chex_default().active());
  auto report = gradient_check([&] { return kd_soft_loss(o, p, w); }, {o}, tight);
  CHECK_MESSAGE(report.passed, report.summary());
  o.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(kd_soft_loss(o, p, w));
  }
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 14; ++j) {
      const double expect = w[j] * (stable_sigmoid(o.value(i * 14 + j)) - p.value(i * 14 + j)) / (3.0 * 14.0);
      CHECK(o.grad()[i * 14 + j] == doctest::Approx(expect).epsilon(1e-13));
    }
  CHECK(o.grad()[kPleuralOther] == 0.0);
}

TEST_CASE("total loss blends the two terms") {
  std::mt19937_64 rng(8);
  Tensor o = random_tensor({4, 14}, rng, -3, 3, false);
  Tensor y = random_tensor({4, 14}, rng, 0, 1, false);
  for (auto& v : y.mutable_values()) v = v > 0.5 ? 1.0 : 0.0;
  Tensor p = random_tensor({4, 14}, rng, 0.01, 0.99, false);
  auto w = dynamic_weights(p);
  const double bce = bcewl(o, y).item();
  const double kd = kd_soft_loss(o, p, w).item();
  CHECK(total_loss(o, y, p, w, {0.0, 1.0}).item() == bce);
  CHECK(total_loss(o, y, p, w, {1.0, 1.0}).item() == kd);
  CHECK(total_loss(o, y, Tensor{}, w, {0.0, 1.0}).item() == bce);
  CHECK(total_loss(o, y, p, w, {0.5, 1.0}).item() == doctest::Approx(0.5 * (bce + kd)).epsilon(1e-15));
  for (double t : {1.0, 2.0}) {
    const double l0 = total_loss(o, y, p, w, {0.0, t}).item();
    const double l1 = total_loss(o, y, p, w, {1.0, t}).item();
    const double lh = total_loss(o, y, p, w, {0.5, t}).item();
    CHECK(std::abs(lh - 0.5 * (l0 + l1)) <= 1e-9);
    const double lq = total_loss(o, y, p, w, {0.25, t}).item();
    CHECK(std::abs(lq - (0.75 * l0 + 0.25 * l1)) <= 1e-9);
  }
  CHECK_THROWS_AS((void)total_loss(o, y, p, w, {1.5, 1.0}), std::invalid_argument);
  CHECK_THROWS_AS((void)total_loss(o, y, p, w, {0.5, 0.0}), std::invalid_argument);
  CHECK_THROWS_AS((void)total_loss(o, y, Tensor{}, w, {0.5, 1.0}), std::invalid_argument);
}

TEST_CASE("temperature touches only the distillation term") {
  std::mt19937_64 rng(9);
  Tensor o = random_tensor({3, 14}, rng, -3, 3);
  Tensor y = Tensor::full({3, 14}, 1.0);
  Tensor p = random_tensor({3, 14}, rng, 0.05, 0.95, false);
  auto w = dynamic_weights(p);
  CHECK(total_loss(o, y, p, w, {0.0, 3.0}).item() == bcewl(o, y).item());
  // Independent evaluation of the softened term.
  double expect = 0.0;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 14; ++j) {
      const double pt = p.value(i * 14 + j);
      const double tl = std::log(pt / (1.0 - pt)) / 2.0;
      expect += w[j] * naive_bce(o.value(i * 14 + j) / 2.0, 1.0 / (1.0 + std::exp(-tl)));
    }
  expect /= 42.0;
  CHECK(total_loss(o, y, p, w, {1.0, 2.0}).item() == doctest::Approx(expect).epsilon(1e-12));
  auto report = gradient_check([&] { return total_loss(o, y, p, w, {0.3, 2.0}); }, {o}, tight);
  CHECK_MESSAGE(report.passed, report.summary());
}

TEST_CASE("losses are invariant to batch order") {
  std::mt19937_64 rng(10);
  Tensor o = random_tensor({5, 14}, rng, -3, 3, false);
  Tensor y = random_tensor({5, 14}, rng, 0, 1, false);
  Tensor p = random_tensor({5, 14}, rng, 0, 1, false);
  const std::vector<std::size_t> perm{3, 1, 4, 0, 2};
  auto permute_rows = [&](const Tensor& t) {
    std::vector<double> v;
    for (auto r : perm)
      for (std::size_t j = 0; j < 14; ++j) v.push_back(t.value(r * 14 + j));
    return Tensor({5, 14}, v);
  };
  auto w = dynamic_weights(p);
  auto wp = dynamic_weights(permute_rows(p));
  for (std::size_t j = 0; j < 14; ++j) CHECK(w[j] == doctest::Approx(wp[j]).epsilon(1e-15));
  const double a = total_loss(o, y, p, w, {0.5, 1.0}).item();
  const double b = total_loss(permute_rows(o), permute_rows(y), permute_rows(p), w, {0.5, 1.0}).item();
  CHECK(a == doctest::Approx(b).epsilon(1e-14));
}

TEST_CASE("label csv reading") {
  std::istringstream in(
      "Path,Sex,No Finding,Enlarged Cardiomediastinum,Cardiomegaly,Lung Opacity,Lung Lesion,Edema,Consolidation,"
      "Pneumonia,Atelectasis,Pneumothorax,Pleural Effusion,Pleural Other,Fracture,Support Devices\n"
      "p1/a.pgm,F,1.0,,,,,,,,,,,,,\n"
      "\"p2,b.pgm\",M,,-1.0,0.0,1,,,,,,,,,,1.0\n");
  auto t = read_label_csv(in);
  REQUIRE(t.rows.size() == 2);
  CHECK(t.paths[1] == "p2,b.pgm");
  CHECK(t.rows[0][kNoFinding] == RawLabel::Positive);
  CHECK(t.rows[1][kEnlargedCardiomediastinum] == RawLabel::Uncertain);
  CHECK(t.rows[1][kCardiomegaly] == RawLabel::Negative);
  CHECK(t.rows[1][kSupportDevices] == RawLabel::Positive);
  CHECK(t.rows[1][kEdema] == RawLabel::Blank);

  std::ostringstream out;
  write_label_csv(out, t);
  std::istringstream back(out.str());
  auto t2 = read_label_csv(back);
  CHECK(t2.paths == t.paths);
  CHECK(t2.rows == t.rows);

  std::istringstream bad(
      "Path,No Finding,Enlarged Cardiomediastinum,Cardiomegaly,Lung Opacity,Lung Lesion,Edema,Consolidation,"
      "Pneumonia,Atelectasis,Pneumothorax,Pleural Effusion,Pleural Other,Fracture,Support Devices\n"
      "x/y.pgm,yes,,,,,,,,,,,,,\n");
  try {
    (void)read_label_csv(bad);
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("x/y.pgm") != std::string::npos);
  }
  std::istringstream missing("Path,No Finding\nx,1\n");
  CHECK_THROWS_AS((void)read_label_csv(missing), std::runtime_error);
}

TEST_CASE("teacher csv round trip is exact") {
  std::mt19937_64 rng(11);
  TeacherLogitTable t{{"s0", "s1", "s2"}, random_tensor({3, 18}, rng, -10, 10, false)};
  std::stringstream io;
  write_teacher_csv(io, t);
  auto back = read_teacher_csv(io);
  CHECK(back.ids == t.ids);
  for (std::size_t i = 0; i < t.logits.numel(); ++i) CHECK(back.logits.value(i) == t.logits.value(i));
  std::istringstream bad("sample_id,o0\nx,1\n");
  CHECK_THROWS_AS((void)read_teacher_csv(bad), std::runtime_error);
}
