#include "mxa/cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "mxa/gradsuite.hpp"
#include "mxa/ops.hpp"

namespace mxa::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string git_blob_hash(std::string_view content) {
  const std::string framed = "blob " + std::to_string(content.size()) + '\0' + std::string(content);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(framed.data(), framed.size(), digest, &len, EVP_sha1(), nullptr) != 1)
    throw std::runtime_error("sha1 failed");
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

json RunManifest::to_json() const {
  return json{{"config", config.to_json()},
              {"seed", config.train.seed},
              {"config_hash", config_hash},
              {"inputs", inputs},
              {"layout", layout}};
}

RunManifest make_manifest(const train::RunConfig& config, json inputs) {
  RunManifest m;
  m.config = config;
  m.config_hash = git_blob_hash(config.to_json().dump());
  m.inputs = std::move(inputs);
  m.layout = {{"manifest", "manifest.json"},
              {"metrics", "metrics.jsonl"},
              {"checkpoint", "checkpoint.mxaz"},
              {"ema_checkpoint", "checkpoint_ema.mxaz"}};
  return m;
}

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw data::IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data::IoError("cannot write " + path.string());
  out << text;
  if (!out) throw data::IoError("write failed for " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw data::IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string fmt(const std::optional<double>& v, int digits = 4) { return v ? fmt(*v, digits) : "NaN"; }

kd::TeacherLogitTable read_teacher(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw data::IoError("cannot open " + path.string());
  try {
    return kd::read_teacher_csv(in);
  } catch (const std::invalid_argument&) {
    throw;
  } catch (const std::runtime_error& e) {
    throw data::IoError(path.string() + ": " + e.what());
  }
}

kd::TeacherAdapterSpec read_map(const std::string& path) {
  if (path.empty()) return kd::TeacherAdapterSpec::chex_default();
  std::ifstream in(path);
  if (!in) throw data::IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return kd::TeacherAdapterSpec::from_json(ss.str());
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::string scope = "ops";
  std::size_t seeds = 5;
  double tolerance = 0.0;  // 0: scope default
  std::string model_preset = "M5-nano-8x8";
  std::size_t elements = 3;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  const auto scope = a.scope == "ops" ? suite::Scope::Ops : a.scope == "mxa" ? suite::Scope::Mxa : suite::Scope::Model;
  std::vector<std::uint64_t> seeds(a.seeds);
  for (std::size_t i = 0; i < a.seeds; ++i) seeds[i] = i;
  suite::SuiteOptions opts;
  if (a.tolerance > 0.0) opts.tolerance = a.tolerance;
  opts.model_preset = a.model_preset;
  opts.model_elements_per_tensor = a.elements;
  const auto checks = suite::run_gradcheck_suite(scope, seeds, opts);

  // Worst error per check name across seeds, in first-seen order.
  std::vector<std::string> names;
  std::map<std::string, double> worst;
  std::map<std::string, bool> passed;
  for (const auto& c : checks) {
    if (!worst.count(c.name)) {
      names.push_back(c.name);
      worst[c.name] = 0.0;
      passed[c.name] = true;
    }
    worst[c.name] = std::max(worst[c.name], c.report.worst_rel_error);
    passed[c.name] = passed[c.name] && c.report.passed;
  }
  out << "gradcheck scope=" << a.scope << " seeds=" << a.seeds << '\n';
  for (const auto& n : names) {
    out << "  " << std::left << std::setw(28) << n << " worst_rel_err=" << std::scientific << std::setprecision(3)
        << worst[n] << std::defaultfloat << (passed[n] ? "  PASS" : "  FAIL") << '\n';
  }
  bool all = true;
  for (const auto& c : checks) {
    if (c.report.passed) continue;
    all = false;
    for (const auto& f : c.report.failures) {
      out << "FAIL " << c.name << " seed=" << c.seed << " input=" << f.input_index << " element=" << f.element_index
          << " analytic=" << std::setprecision(10) << f.analytic << " numeric=" << f.numeric;
      if (!f.reason.empty()) out << " (" << f.reason << ")";
      out << '\n';
    }
  }
  out << (all ? "all checks passed" : "gradient check FAILED") << " (" << checks.size() << " checks)\n";
  return all ? kOk : kNumeric;
}

struct SynthArgs {
  std::string spec;
  std::size_t n = 500;
  std::uint64_t seed = 0;
  std::string out;
  std::string teacher_out;
  std::string teacher_map;
  double teacher_margin = 2.0;
  double teacher_sigma = 1.0;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  const auto spec = a.spec.empty() ? data::default_spec() : data::SyntheticSpec::load(a.spec);
  const auto ds = data::synth_dataset(spec, a.n, a.seed);
  data::write_dataset(a.out, ds);
  write_text(fs::path(a.out) / "spec.json", spec.to_json().dump(2) + "\n");
  out << "wrote " << ds.size() << " samples to " << a.out << '\n';
  if (!a.teacher_out.empty()) {
    const auto t = data::synth_teacher_logits(ds, read_map(a.teacher_map), {a.teacher_margin, a.teacher_sigma}, a.seed);
    std::ofstream f(a.teacher_out);
    if (!f) throw data::IoError("cannot write " + a.teacher_out);
    kd::write_teacher_csv(f, t);
    if (!f) throw data::IoError("write failed for " + a.teacher_out);
    out << "wrote teacher logits to " << a.teacher_out << '\n';
  }
  return kOk;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string val;
  std::string teacher_logits;
  std::string teacher_map;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  auto rc = load_run_config(a.config);
  if (a.seed) rc.train.seed = *a.seed;
  if (rc.train.loss.alpha > 0.0 && a.teacher_logits.empty())
    throw std::invalid_argument("alpha = " + std::to_string(rc.train.loss.alpha) + " needs --teacher-logits");

  const auto train_ds = data::load_dataset(a.data);
  std::optional<data::Dataset> val_ds;
  if (!a.val.empty()) val_ds = data::load_dataset(a.val);
  train::TrainData td;
  td.train = &train_ds;
  td.val = val_ds ? &*val_ds : nullptr;
  td.adapter = read_map(a.teacher_map);
  if (!a.teacher_logits.empty() && rc.train.loss.alpha > 0.0)
    td.teacher_logits = data::align_teacher(read_teacher(a.teacher_logits), train_ds);

  const auto manifest = make_manifest(
      rc, json{{"data", a.data},
               {"val", a.val.empty() ? json(nullptr) : json(a.val)},
               {"teacher_logits", a.teacher_logits.empty() ? json(nullptr) : json(a.teacher_logits)},
               {"teacher_map", a.teacher_map.empty() ? json("builtin:chex") : json(a.teacher_map)}});
  const fs::path dir(a.out);
  ensure_dir(dir);
  write_text(dir / "manifest.json", manifest.to_json().dump(2) + "\n");

  std::ofstream log(dir / "metrics.jsonl", std::ios::binary);
  if (!log) throw data::IoError("cannot write " + (dir / "metrics.jsonl").string());
  const auto total = rc.train.total_epochs;
  auto on_epoch = [&](const json& line) {
    log << line.dump() << '\n';
    log.flush();
    out << "epoch " << line["epoch"] << '/' << total << " lr=" << std::scientific << std::setprecision(3)
        << line["lr"].get<double>() << std::defaultfloat << " loss=" << fmt(line["loss"].get<double>());
    if (line.contains("auc_macro")) {
      auto opt = [](const json& v) { return v.is_null() ? std::optional<double>{} : v.get<double>(); };
      out << " val_auc_macro=" << fmt(opt(line["auc_macro"])) << " raw=" << fmt(opt(line["raw"]["auc_macro"]));
    }
    out << '\n';
  };
  const auto result = train::train(rc.model, td, rc.train, {on_epoch});

  model::Checkpoint ck;
  ck.epoch = result.log.size();
  ck.config = rc.model.to_json();
  ck.extra = {{"weights", "raw"}, {"run", rc.to_json()}, {"config_hash", manifest.config_hash}};
  for (const auto& [path, t] : result.model.parameters()) ck.tensors.emplace(path, t);
  model::save_checkpoint((dir / "checkpoint.mxaz").string(), ck);
  ck.extra["weights"] = "ema";
  ck.tensors.clear();
  const auto params = result.model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) ck.tensors.emplace(params[i].first, result.ema[i]);
  model::save_checkpoint((dir / "checkpoint_ema.mxaz").string(), ck);
  out << "steps=" << result.steps << " rejected=" << result.rejected_steps << " outputs in " << dir.string() << '\n';
  return kOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string json_out;
  std::size_t batch_size = 32;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto m = load_model(a.checkpoint);
  if (m.config().num_labels != kd::kNumLabels) {
    throw std::invalid_argument("checkpoint has " + std::to_string(m.config().num_labels) + " labels, data has " +
                                std::to_string(kd::kNumLabels));
  }
  const auto ds = data::load_dataset(a.data);
  const auto r = train::evaluate(m, ds, a.batch_size);
  out << "Label  AUC     Acc\n";
  for (std::size_t k = 0; k < kd::kNumLabels; ++k) {
    out << std::left << std::setw(6) << kd::label_abbrevs()[k] << ' ' << std::setw(7) << fmt(r.auc_per_label[k])
        << ' ' << fmt(r.acc_per_label[k]) << '\n';
  }
  out << "macro AUC  " << fmt(r.auc_macro) << '\n'
      << "micro AUC  " << fmt(r.auc_micro) << '\n'
      << "accuracy   " << fmt(r.acc_macro) << " (micro " << fmt(r.acc_micro) << ")\n"
      << "F1 macro   " << fmt(r.f1_macro) << '\n'
      << "BCE loss   " << fmt(r.loss) << '\n';
  auto j = r.to_json();
  j["n"] = ds.size();
  j["checkpoint"] = a.checkpoint;
  if (!a.json_out.empty()) write_text(a.json_out, j.dump(2) + "\n");
  out << j.dump() << '\n';
  return kOk;
}

struct AdaptArgs {
  std::string logits;
  std::string map;
  std::string out;
};

int cmd_adapt(const AdaptArgs& a, std::ostream& out) {
  const auto spec = read_map(a.map);
  const auto table = read_teacher(a.logits);
  std::set<std::string> seen;
  for (const auto& id : table.ids)
    if (!seen.insert(id).second) throw std::invalid_argument(a.logits + ": duplicate sample id \"" + id + "\"");
  if (table.ids.empty()) throw std::invalid_argument(a.logits + ": no rows");
  kd::AdaptStats stats;
  const Tensor adapted = kd::adapt_teacher(table.logits, spec, &stats);
  std::ofstream f(a.out);
  if (!f) throw data::IoError("cannot write " + a.out);
  kd::write_adapted_csv(f, table.ids, adapted);
  if (!f) throw data::IoError("write failed for " + a.out);

  Tensor probs;
  {
    NoGradGuard guard;
    probs = sigmoid(adapted);
  }
  const auto active = spec.active();
  const auto w = kd::dynamic_weights(probs, active);
  out << "adapted " << table.ids.size() << " rows -> " << a.out;
  if (stats.clamped) out << " (" << stats.clamped << " No Finding logits clamped)";
  out << "\nweights";
  for (std::size_t k = 0; k < kd::kNumLabels; ++k)
    out << ' ' << kd::label_abbrevs()[k] << '=' << std::setprecision(6) << w[k];
  out << '\n';
  return kOk;
}

struct AttnArgs {
  std::string checkpoint_a;
  std::string checkpoint_b;
  std::string image;
  std::string out;
};

Tensor load_image(const std::string& path, std::size_t expected) {
  const auto img = data::read_pgm(path);
  if (img.width != expected || img.height != expected) {
    throw std::invalid_argument(path + ": image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                                ", model expects " + std::to_string(expected) + "x" + std::to_string(expected));
  }
  std::vector<double> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = img.pixels[i] / 255.0;
  return Tensor(Shape{1, 1, expected, expected}, std::move(v));
}

// Nearest-neighbour upsampling of a token map to the image size.
void write_map(const fs::path& path, const model::StageAttention& st, std::size_t size,
               const std::function<std::uint8_t(double)>& to_byte) {
  data::GrayImage img{size, size, std::vector<std::uint8_t>(size * size)};
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const std::size_t ty = y * st.grid_h / size, tx = x * st.grid_w / size;
      img.pixels[y * size + x] = to_byte(st.normalized[0][ty * st.grid_w + tx]);
    }
  data::write_pgm(path, img);
}

void write_roi_boxes(const fs::path& path, const model::Model& m, const Tensor& image) {
  model::ForwardTrace trace;
  {
    NoGradGuard guard;
    (void)m.forward(image, &trace);
  }
  std::vector<std::string> ids;
  std::vector<Tensor> rows;
  std::vector<std::size_t> per_stage(3, 0);
  for (std::size_t i = 0; i < trace.boxes.size(); ++i) {
    const auto s = trace.block_stage[i];
    ids.push_back("stage" + std::to_string(s) + ".block" + std::to_string(per_stage[s]++));
    rows.push_back(trace.boxes[i]);
  }
  std::ofstream f(path);
  if (!f) throw data::IoError("cannot write " + path.string());
  nn::write_roi_csv(f, ids, concat(rows, 0));
}

int cmd_attn(const AttnArgs& a, std::ostream& out) {
  const auto ma = load_model(a.checkpoint_a);
  const std::size_t S = ma.config().image_size;
  const Tensor image = load_image(a.image, S);
  const fs::path dir(a.out);
  ensure_dir(dir);
  auto gray = [](double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
  auto signed_gray = [](double d) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(128.0 + 127.0 * d, 0.0, 255.0)));
  };
  const auto sa = model::attention_scores(ma, image);
  for (const auto& st : sa) write_map(dir / ("a_stage" + std::to_string(st.stage) + ".pgm"), st, S, gray);
  if (ma.config().mxa_enabled) write_roi_boxes(dir / "a_roi.csv", ma, image);
  std::size_t written = sa.size();
  if (!a.checkpoint_b.empty()) {
    const auto mb = load_model(a.checkpoint_b);
    if (mb.config().image_size != S) throw std::invalid_argument("checkpoints disagree on image size");
    const auto sb = model::attention_scores(mb, image);
    for (const auto& st : sb) write_map(dir / ("b_stage" + std::to_string(st.stage) + ".pgm"), st, S, gray);
    if (mb.config().mxa_enabled) write_roi_boxes(dir / "b_roi.csv", mb, image);
    // a - b: brighter where B attends less than A.
    const auto delta = model::attention_delta(sb, sa);
    for (const auto& st : delta)
      write_map(dir / ("delta_stage" + std::to_string(st.stage) + ".pgm"), st, S, signed_gray);
    written += sb.size() + delta.size();
  }
  out << "wrote " << written << " maps to " << dir.string() << '\n';
  return kOk;
}

}  // namespace

train::RunConfig load_run_config(const fs::path& path) {
  const json j = read_json(path);
  if (j.is_object() && j.contains("config_hash") && j.contains("config"))
    return train::RunConfig::from_json(j.at("config"));
  return train::RunConfig::from_json(j);
}

model::Model load_model(const fs::path& checkpoint) {
  const auto ck = model::load_checkpoint(checkpoint.string());
  const auto cfg = model::ModelConfig::from_json(ck.config);
  auto m = model::Model::build(cfg, 0);
  m.load_parameters(ck.tensors);
  return m;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-label chest X-ray classifier with ROI attention, at desk scale.", "mxa"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  GradcheckArgs g;
  auto* gc = app.add_subcommand("gradcheck", "Compare tape gradients with central differences");
  gc->add_option("--scope", g.scope, "What to check")->check(CLI::IsMember({"ops", "mxa", "model"}));
  gc->add_option("--seeds", g.seeds, "Number of seeds (0, 1, ...)")->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", g.tolerance, "Relative error bound; 0 uses 1e-4 (ops, mxa) or 1e-3 (model)");
  gc->add_option("--model-preset", g.model_preset, "Model checked by --scope model");
  gc->add_option("--elements-per-tensor", g.elements, "Elements probed per parameter in --scope model")
      ->check(CLI::PositiveNumber);

  SynthArgs s;
  auto* sy = app.add_subcommand("synth", "Write a planted-signal synthetic dataset");
  sy->add_option("--spec", s.spec, "Synthetic spec JSON (empty: built-in default)");
  sy->add_option("--n", s.n, "Number of samples");
  sy->add_option("--seed", s.seed, "Generator seed");
  sy->add_option("--out", s.out, "Output directory")->required();
  sy->add_option("--teacher-out", s.teacher_out, "Also write synthetic 18-way teacher logits here");
  sy->add_option("--teacher-map", s.teacher_map, "Teacher map JSON for --teacher-out (empty: built-in)");
  sy->add_option("--teacher-margin", s.teacher_margin, "Mean |logit| of the synthetic teacher");
  sy->add_option("--teacher-sigma", s.teacher_sigma, "Gaussian noise on the synthetic teacher logits");

  TrainArgs t;
  auto* tr = app.add_subcommand("train", "Train a model and write checkpoints and a metrics log");
  tr->add_option("--config", t.config, "Run config JSON (or a manifest.json from a previous run)")->required();
  tr->add_option("--data", t.data, "Training dataset directory")->required();
  tr->add_option("--val", t.val, "Validation dataset directory (empty: none)");
  tr->add_option("--teacher-logits", t.teacher_logits, "Teacher logits CSV; required when alpha > 0");
  tr->add_option("--teacher-map", t.teacher_map, "Teacher map JSON (empty: built-in)");
  tr->add_option("--out", t.out, "Output directory")->required();
  tr->add_option("--seed", t.seed, "Overrides train.seed from the config");

  EvalArgs e;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  ev->add_option("--checkpoint", e.checkpoint, "Checkpoint file")->required();
  ev->add_option("--data", e.data, "Dataset directory")->required();
  ev->add_option("--json", e.json_out, "Also write the report here (empty: stdout only)");
  ev->add_option("--batch-size", e.batch_size, "Evaluation batch size")->check(CLI::PositiveNumber);

  AdaptArgs ad;
  auto* at = app.add_subcommand("adapt-teacher", "Map 18-way teacher logits onto the 14 student labels");
  at->add_option("--logits", ad.logits, "Teacher logits CSV (sample_id,o0..o17)")->required();
  at->add_option("--map", ad.map, "Teacher map JSON (empty: built-in)");
  at->add_option("--out", ad.out, "Adapted CSV (sample_id,a0..a13)")->required();

  AttnArgs am;
  auto* ma = app.add_subcommand("attn-maps", "Export per-stage attention maps as PGM");
  ma->add_option("--checkpoint-a", am.checkpoint_a, "First checkpoint")->required();
  ma->add_option("--checkpoint-b", am.checkpoint_b, "Second checkpoint for the delta maps (empty: none)");
  ma->add_option("--image", am.image, "Input image (PGM)")->required();
  ma->add_option("--out", am.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    return app.exit(ex, out, err) == 0 ? kOk : kUsage;
  }

  try {
    if (*gc) return cmd_gradcheck(g, out);
    if (*sy) return cmd_synth(s, out);
    if (*tr) return cmd_train(t, out);
    if (*ev) return cmd_eval(e, out);
    if (*at) return cmd_adapt(ad, out);
    if (*ma) return cmd_attn(am, out);
  } catch (const NumericError& ex) {
    err << "numeric error: " << ex.what() << '\n';
    return kNumeric;
  } catch (const json::exception& ex) {  // wrongly typed config values
    err << "error: " << ex.what() << '\n';
    return kUsage;
  } catch (const std::logic_error& ex) {
    err << "error: " << ex.what() << '\n';
    return kUsage;
  } catch (const std::exception& ex) {
    err << "i/o error: " << ex.what() << '\n';
    return kIo;
  }
  return kUsage;
}

}  // namespace mxa::cli
