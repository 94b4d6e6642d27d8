#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "json.hpp"
#include "mxa/cli.hpp"

using namespace mxa;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("mxa_cli_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& leaf) const { return (path / leaf).string(); }
};

struct Outcome {
  int code;
  std::string out, err;
};

Outcome mxa_cmd(std::vector<std::string> args) {
  args.insert(args.begin(), "mxa");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

// 8x8 images keep training runs in tests fast.
std::string small_spec(const TempDir& d) {
  auto s = data::default_spec();
  s.image_size = 8;
  write_file(d / "spec8.json", s.to_json().dump());
  return d / "spec8.json";
}

std::string small_run_config(const TempDir& d, double alpha) {
  const json j{{"model", {{"name", "M5-nano-8x8"}, {"image_size", 8}, {"patch_size", 1}}},
               {"train", {{"total_epochs", 1}, {"warmup_epochs", 1}, {"batch_size", 4}}},
               {"loss", {{"alpha", alpha}}}};
  const auto path = d / ("run_" + std::to_string(alpha) + ".json");
  write_file(path, j.dump());
  return path;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  return cells;
}

}  // namespace

TEST_CASE("help lists every subcommand and shows defaults") {
  const auto top = mxa_cmd({"--help"});
  CHECK(top.code == 0);
  for (const char* sub : {"gradcheck", "synth", "train", "eval", "adapt-teacher", "attn-maps"})
    CHECK(top.out.find(sub) != std::string::npos);
  const auto synth = mxa_cmd({"synth", "--help"});
  CHECK(synth.code == 0);
  CHECK(synth.out.find("--n UINT [500]") != std::string::npos);
  CHECK(synth.out.find("--teacher-margin FLOAT [2]") != std::string::npos);
  const auto gc = mxa_cmd({"gradcheck", "--help"});
  CHECK(gc.out.find("[ops]") != std::string::npos);
  CHECK(gc.out.find("--seeds UINT:POSITIVE [5]") != std::string::npos);
  const auto ev = mxa_cmd({"eval", "--help"});
  CHECK(ev.out.find("[32]") != std::string::npos);
}

TEST_CASE("usage errors exit 1") {
  CHECK(mxa_cmd({}).code == cli::kUsage);
  CHECK(mxa_cmd({"synth"}).code == cli::kUsage);  // --out missing
  CHECK(mxa_cmd({"gradcheck", "--scope", "everything"}).code == cli::kUsage);
  CHECK(mxa_cmd({"no-such-command"}).code == cli::kUsage);
}

TEST_CASE("bad configs exit 1") {
  TempDir d("cfg");
  write_file(d / "typo.json", R"({"train": {"total_epoch": 3}})");
  write_file(d / "type.json", R"({"train": {"total_epochs": "three"}})");
  write_file(d / "broken.json", R"({"train": )");
  for (const char* name : {"typo.json", "type.json", "broken.json"}) {
    const auto r = mxa_cmd({"train", "--config", d / name, "--data", d / "none", "--out", d / "run"});
    CHECK_MESSAGE(r.code == cli::kUsage, name);
  }
  CHECK_FALSE(fs::exists(d.path / "run"));
}

TEST_CASE("missing inputs exit 3 and name the path") {
  TempDir d("io");
  const auto r = mxa_cmd({"eval", "--checkpoint", d / "absent.mxaz", "--data", d / "nodata"});
  CHECK(r.code == cli::kIo);
  CHECK(r.err.find("absent.mxaz") != std::string::npos);
  const auto t = mxa_cmd({"adapt-teacher", "--logits", d / "nope.csv", "--out", d / "a.csv"});
  CHECK(t.code == cli::kIo);
  CHECK(t.err.find("nope.csv") != std::string::npos);
}

TEST_CASE("gradcheck over the MXA block passes and reports the worst error") {
  const auto r = mxa_cmd({"gradcheck", "--scope", "mxa", "--seeds", "2"});
  CHECK(r.code == cli::kOk);
  CHECK(r.out.find("mxa_forward") != std::string::npos);
  CHECK(r.out.find("worst_rel_err=") != std::string::npos);
}

TEST_CASE("gradcheck exits 2 when a check fails") {
  // An impossible tolerance turns rounding noise into failures.
  const auto r = mxa_cmd({"gradcheck", "--scope", "mxa", "--seeds", "1", "--tolerance", "1e-300"});
  CHECK(r.code == cli::kNumeric);
  CHECK(r.out.find("FAIL mxa_forward seed=0") != std::string::npos);
  CHECK(r.out.find("analytic=") != std::string::npos);
  CHECK(r.out.find("numeric=") != std::string::npos);
}

TEST_CASE("synth with n = 0 writes a header-only label file") {
  TempDir d("synth0");
  const auto r = mxa_cmd({"synth", "--n", "0", "--out", d / "ds"});
  REQUIRE(r.code == 0);
  const auto csv = slurp(d.path / "ds" / "labels.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1);
  CHECK(csv.rfind("Path,No Finding,", 0) == 0);
  CHECK(fs::exists(d.path / "ds" / "spec.json"));
}

TEST_CASE("synth is byte-identical for equal seeds and differs otherwise") {
  TempDir d("synthdet");
  const auto spec = small_spec(d);
  for (const char* name : {"a", "b"})
    REQUIRE(mxa_cmd({"synth", "--spec", spec, "--n", "20", "--seed", "7", "--out", d / name, "--teacher-out",
                     d / (std::string(name) + ".csv")})
                .code == 0);
  REQUIRE(mxa_cmd({"synth", "--spec", spec, "--n", "20", "--seed", "8", "--out", d / "c"}).code == 0);
  CHECK(slurp(d.path / "a" / "labels.csv") == slurp(d.path / "b" / "labels.csv"));
  CHECK(slurp(d.path / "a.csv") == slurp(d.path / "b.csv"));
  for (int i = 0; i < 20; ++i) {
    char leaf[32];
    std::snprintf(leaf, sizeof leaf, "images/s%06d.pgm", i);
    CHECK(slurp(d.path / "a" / leaf) == slurp(d.path / "b" / leaf));
  }
  CHECK(slurp(d.path / "a" / "labels.csv") != slurp(d.path / "c" / "labels.csv"));
}

TEST_CASE("synth label rates follow the closed-form marginals") {
  TempDir d("synthrate");
  const auto spec = small_spec(d);
  REQUIRE(mxa_cmd({"synth", "--spec", spec, "--n", "2000", "--seed", "3", "--out", d / "ds"}).code == 0);
  const auto ds = data::load_dataset(d.path / "ds");
  const auto m = data::default_spec().marginals();
  // Uncertain cells map to 1 and blank cells to 0 under U-1, so the positive
  // rate is the planted marginal.
  const auto y = ds.targets();
  for (std::size_t k = 0; k < kd::kNumLabels; ++k) {
    double pos = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) pos += y.values()[i * kd::kNumLabels + k];
    CHECK(std::abs(pos / static_cast<double>(ds.size()) - m[k]) < 0.04);
  }
}

TEST_CASE("adapt-teacher golden values") {
  TempDir d("adapt");
  std::string csv = "sample_id";
  for (int k = 0; k < 18; ++k) csv += ",o" + std::to_string(k);
  csv += "\nzeros";
  for (int k = 0; k < 18; ++k) csv += ",0";
  csv += "\n";
  write_file(d / "zero.csv", csv);
  REQUIRE(mxa_cmd({"adapt-teacher", "--logits", d / "zero.csv", "--out", d / "out.csv"}).code == 0);
  std::ifstream in(d / "out.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "sample_id,a0,a1,a2,a3,a4,a5,a6,a7,a8,a9,a10,a11,a12,a13");
  const auto cells = split_csv_line(row);
  REQUIRE(cells.size() == 15);
  CHECK(cells[0] == "zeros");
  // No Finding = logit(prod over the 18 teacher outputs of (1 - 0.5)).
  const double q = std::ldexp(1.0, -18);
  CHECK(std::stod(cells[1]) == doctest::Approx(std::log(q / (1 - q))).epsilon(1e-12));
  CHECK(std::stod(cells[1]) == doctest::Approx(-12.4766).epsilon(1e-5));
  CHECK(std::stod(cells[12]) == 0.0);  // PO is a zero slot
  CHECK(std::stod(cells[14]) == 0.0);  // SD too

  // Saturated teacher: every mapped probability is 1, so its weight is 0.
  csv = "sample_id";
  for (int k = 0; k < 18; ++k) csv += ",o" + std::to_string(k);
  csv += "\nhot";
  for (int k = 0; k < 18; ++k) csv += ",50";
  csv += "\n";
  write_file(d / "hot.csv", csv);
  const auto r = mxa_cmd({"adapt-teacher", "--logits", d / "hot.csv", "--out", d / "hot_out.csv"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("1 No Finding logits clamped") != std::string::npos);
  CHECK(r.out.find(" ECM=0 ") != std::string::npos);
  CHECK(r.out.find(" PO=0 ") != std::string::npos);
  CHECK(r.out.find(" NF=1 ") != std::string::npos);
}

TEST_CASE("adapt-teacher rejects duplicate sample ids") {
  TempDir d("dup");
  std::string csv = "sample_id";
  for (int k = 0; k < 18; ++k) csv += ",o" + std::to_string(k);
  csv += "\n";
  for (int r = 0; r < 2; ++r) {
    csv += "same";
    for (int k = 0; k < 18; ++k) csv += ",0.5";
    csv += "\n";
  }
  write_file(d / "dup.csv", csv);
  const auto r = mxa_cmd({"adapt-teacher", "--logits", d / "dup.csv", "--out", d / "o.csv"});
  CHECK(r.code == cli::kUsage);
  CHECK(r.err.find("duplicate") != std::string::npos);
  CHECK_FALSE(fs::exists(d.path / "o.csv"));
}

TEST_CASE("train refuses alpha > 0 without teacher logits before writing anything") {
  TempDir d("refuse");
  const auto r = mxa_cmd({"train", "--config", small_run_config(d, 0.5), "--data", d / "missing", "--out", d / "run"});
  CHECK(r.code == cli::kUsage);
  CHECK(r.err.find("--teacher-logits") != std::string::npos);
  CHECK_FALSE(fs::exists(d.path / "run"));
}

TEST_CASE("train, eval and attn-maps end to end") {
  TempDir d("e2e");
  const auto spec = small_spec(d);
  REQUIRE(mxa_cmd({"synth", "--spec", spec, "--n", "16", "--seed", "1", "--out", d / "train", "--teacher-out",
                   d / "teacher.csv"})
              .code == 0);
  REQUIRE(mxa_cmd({"synth", "--spec", spec, "--n", "12", "--seed", "2", "--out", d / "val"}).code == 0);

  const auto t = mxa_cmd({"train", "--config", small_run_config(d, 0.5), "--data", d / "train", "--val", d / "val",
                          "--teacher-logits", d / "teacher.csv", "--out", d / "run"});
  REQUIRE_MESSAGE(t.code == 0, t.err);
  const fs::path run = d.path / "run";
  for (const char* f : {"manifest.json", "metrics.jsonl", "checkpoint.mxaz", "checkpoint_ema.mxaz"})
    CHECK(fs::exists(run / f));

  const auto manifest = json::parse(slurp(run / "manifest.json"));
  CHECK(manifest["config_hash"] == cli::git_blob_hash(manifest["config"].dump()));
  CHECK(manifest["config"]["loss"]["alpha"] == 0.5);
  CHECK(manifest["inputs"]["teacher_logits"] == d / "teacher.csv");
  const auto line = json::parse(slurp(run / "metrics.jsonl"));
  CHECK(line["epoch"] == 1);
  CHECK(line.contains("auc_macro"));

  // A manifest is a valid --config and reproduces the run.
  const auto t2 = mxa_cmd({"train", "--config", (run / "manifest.json").string(), "--data", d / "train", "--val",
                           d / "val", "--teacher-logits", d / "teacher.csv", "--out", d / "rerun"});
  REQUIRE(t2.code == 0);
  CHECK(slurp(run / "metrics.jsonl") == slurp(d.path / "rerun" / "metrics.jsonl"));
  CHECK(slurp(run / "checkpoint.mxaz") == slurp(d.path / "rerun" / "checkpoint.mxaz"));

  const auto ckpt = (run / "checkpoint_ema.mxaz").string();
  const auto e1 = mxa_cmd({"eval", "--checkpoint", ckpt, "--data", d / "val", "--json", d / "eval.json"});
  const auto e2 = mxa_cmd({"eval", "--checkpoint", ckpt, "--data", d / "val"});
  REQUIRE(e1.code == 0);
  CHECK(e1.out == e2.out);
  CHECK(e1.out.find("NF ") != std::string::npos);
  CHECK(e1.out.find("macro AUC") != std::string::npos);
  const auto report = json::parse(slurp(d.path / "eval.json"));
  CHECK(report["n"] == 12);
  CHECK(report["auc_per_label"].size() == 14);
  // The EMA metrics logged at the last epoch are the ones eval recomputes.
  CHECK(report["auc_macro"] == line["auc_macro"]);

  const auto img = d / "val/images/s000003.pgm";
  const auto a = mxa_cmd({"attn-maps", "--checkpoint-a", ckpt, "--checkpoint-b", ckpt, "--image", img, "--out",
                          d / "maps"});
  REQUIRE(a.code == 0);
  for (int s = 0; s < 3; ++s) {
    const auto delta = data::read_pgm(d.path / "maps" / ("delta_stage" + std::to_string(s) + ".pgm"));
    CHECK(delta.width == 8);
    CHECK(std::all_of(delta.pixels.begin(), delta.pixels.end(), [](auto p) { return p == 128; }));
    const auto map = data::read_pgm(d.path / "maps" / ("a_stage" + std::to_string(s) + ".pgm"));
    CHECK(*std::max_element(map.pixels.begin(), map.pixels.end()) == 255);
  }
  std::ifstream roi(d.path / "maps" / "a_roi.csv");
  std::string header;
  std::getline(roi, header);
  CHECK(header == "sample_id,x1,y1,x2,y2");

  // Images of the wrong size are a usage error.
  auto big = data::default_spec();
  write_file(d / "spec64.json", big.to_json().dump());
  REQUIRE(mxa_cmd({"synth", "--spec", d / "spec64.json", "--n", "1", "--out", d / "big"}).code == 0);
  const auto bad = mxa_cmd({"attn-maps", "--checkpoint-a", ckpt, "--image", d / "big/images/s000000.pgm", "--out",
                            d / "maps2"});
  CHECK(bad.code == cli::kUsage);
  CHECK(bad.err.find("8x8") != std::string::npos);
}

TEST_CASE("git blob hash matches git's object ids") {
  // `printf 'hello\n' | git hash-object --stdin`
  CHECK(cli::git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
  CHECK(cli::git_blob_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}
