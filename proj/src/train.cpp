#include "mxa/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "mxa/ops.hpp"

namespace mxa::train {

using nlohmann::json;

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
  if (!(lr_min >= 0.0) || !(lr_min <= lr_max) || !std::isfinite(lr_max)) fail("need 0 <= lr_min <= lr_max");
  if (total_epochs == 0) fail("total_epochs must be positive");
  if (!(warmup_epochs >= 0.0) || !(cooldown_epochs >= 0.0) ||
      warmup_epochs + cooldown_epochs > static_cast<double>(total_epochs))
    fail("warmup_epochs + cooldown_epochs must fit in total_epochs");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(clip_norm > 0.0)) fail("clip_norm must be positive");
  if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) fail("ema_decay must lie in [0, 1]");
  if (batch_size == 0) fail("batch_size must be positive");
  if (max_steps && *max_steps == 0) fail("max_steps must be positive when given");
  loss.validate();
}

Schedule TrainConfig::schedule() const {
  return Schedule{lr_max, lr_min, warmup_epochs, static_cast<double>(total_epochs), cooldown_epochs};
}

json TrainConfig::to_json() const {
  json j{{"lr_max", lr_max},
         {"lr_min", lr_min},
         {"warmup_epochs", warmup_epochs},
         {"cooldown_epochs", cooldown_epochs},
         {"total_epochs", total_epochs},
         {"weight_decay", weight_decay},
         {"clip_norm", clip_norm},
         {"ema_decay", ema_decay},
         {"batch_size", batch_size},
         {"seed", seed},
         {"max_steps", max_steps ? json(*max_steps) : json(nullptr)}};
  return j;
}

TrainConfig TrainConfig::from_json(const json& train_in, const json& loss_in) {
  const json& train = train_in.is_null() ? json::object() : train_in;
  const json& loss = loss_in.is_null() ? json::object() : loss_in;
  if (!train.is_object() || !loss.is_object()) throw std::invalid_argument("train config: expected objects");
  static const std::set<std::string> known = {"lr_max",       "lr_min",    "warmup_epochs", "cooldown_epochs",
                                              "total_epochs", "weight_decay", "clip_norm",  "ema_decay",
                                              "batch_size",   "seed",      "max_steps"};
  for (const auto& [key, _] : train.items())
    if (!known.count(key)) throw std::invalid_argument("train config: unknown key \"" + key + "\"");
  for (const auto& [key, _] : loss.items())
    if (key != "alpha" && key != "tau") throw std::invalid_argument("loss config: unknown key \"" + key + "\"");
  TrainConfig c;
  try {
    auto get = [&](const char* key, auto& field) {
      if (train.contains(key)) field = train[key].get<std::remove_reference_t<decltype(field)>>();
    };
    get("lr_max", c.lr_max);
    get("lr_min", c.lr_min);
    get("warmup_epochs", c.warmup_epochs);
    get("cooldown_epochs", c.cooldown_epochs);
    get("total_epochs", c.total_epochs);
    get("weight_decay", c.weight_decay);
    get("clip_norm", c.clip_norm);
    get("ema_decay", c.ema_decay);
    get("batch_size", c.batch_size);
    get("seed", c.seed);
    if (train.contains("max_steps") && !train["max_steps"].is_null())
      c.max_steps = train["max_steps"].get<std::size_t>();
    if (loss.contains("alpha")) c.loss.alpha = loss["alpha"].get<double>();
    if (loss.contains("tau")) c.loss.temperature = loss["tau"].get<double>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

json RunConfig::to_json() const {
  return json{{"model", model.to_json()},
              {"train", train.to_json()},
              {"loss", {{"alpha", train.loss.alpha}, {"tau", train.loss.temperature}}}};
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("run config: expected an object");
  for (const auto& [key, _] : j.items())
    if (key != "model" && key != "train" && key != "loss")
      throw std::invalid_argument("run config: unknown section \"" + key + "\"");
  RunConfig rc;
  rc.model = model::ModelConfig::from_json(j.value("model", json::object()));
  rc.model.validate();
  rc.train = TrainConfig::from_json(j.value("train", json::object()), j.value("loss", json::object()));
  return rc;
}

TrainConfig full_scale_profile() {
  TrainConfig c;
  c.total_epochs = 50;
  c.warmup_epochs = 5;
  c.cooldown_epochs = 10;
  c.ema_decay = 0.99996;
  c.batch_size = 64;
  c.loss = {0.5, 1.0};
  return c;
}

model::Model TrainResult::ema_model() const {
  auto m = model::Model::build(model.config(), 0);
  std::map<std::string, Tensor> values;
  const auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) values.emplace(params[i].first, ema[i]);
  m.load_parameters(values);
  return m;
}

namespace {

Tensor rows_of(const Tensor& t, std::span<const std::size_t> index) {
  const std::size_t C = t.dim(1);
  std::vector<double> v(index.size() * C);
  const auto src = t.values();
  for (std::size_t b = 0; b < index.size(); ++b)
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(index[b] * C), C,
                v.begin() + static_cast<std::ptrdiff_t>(b * C));
  return Tensor(Shape{index.size(), C}, std::move(v));
}

void check_image_size(const data::Dataset& ds, const model::ModelConfig& cfg, const char* which) {
  if (ds.size() && ds.images.dim(2) != cfg.image_size) {
    throw std::invalid_argument(std::string(which) + " images are " + std::to_string(ds.images.dim(2)) +
                                " px, model expects " + std::to_string(cfg.image_size));
  }
}

struct Batches {
  std::vector<std::size_t> order;
  std::size_t batch_size;
  std::size_t count() const { return (order.size() + batch_size - 1) / batch_size; }
  std::span<const std::size_t> operator[](std::size_t b) const {
    const std::size_t lo = b * batch_size, hi = std::min(order.size(), lo + batch_size);
    return std::span<const std::size_t>(order).subspan(lo, hi - lo);
  }
};

Tensor predict_logits(const model::Model& model, const data::Dataset& ds, std::size_t batch_size) {
  if (ds.size() == 0) throw std::invalid_argument("evaluation: empty dataset");
  check_image_size(ds, model.config(), "evaluation");
  NoGradGuard guard;
  const std::size_t L = model.config().num_labels;
  std::vector<double> out(ds.size() * L);
  Batches batches{std::vector<std::size_t>(ds.size()), batch_size};
  std::iota(batches.order.begin(), batches.order.end(), 0);
  for (std::size_t b = 0; b < batches.count(); ++b) {
    const auto idx = batches[b];
    const Tensor logits = model.forward(ds.batch(idx).first);
    std::copy(logits.values().begin(), logits.values().end(), out.begin() + static_cast<std::ptrdiff_t>(idx[0] * L));
  }
  return Tensor(Shape{ds.size(), L}, std::move(out));
}

}  // namespace

Tensor predict(const model::Model& model, const data::Dataset& ds, std::size_t batch_size) {
  return sigmoid(predict_logits(model, ds, batch_size));
}

MetricsReport evaluate(const model::Model& model, const data::Dataset& ds, std::size_t batch_size) {
  if (model.config().num_labels != kd::kNumLabels) {
    throw std::invalid_argument("evaluate: model has " + std::to_string(model.config().num_labels) +
                                " outputs, data has " + std::to_string(kd::kNumLabels) + " labels");
  }
  const Tensor logits = predict_logits(model, ds, batch_size);
  const Tensor y = ds.targets();
  return evaluate_predictions(sigmoid(logits), y, kd::bcewl(logits, y).item());
}

TrainResult train(const model::ModelConfig& model_cfg, const TrainData& data, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  cfg.validate();
  model_cfg.validate();
  if (!data.train || data.train->size() == 0) throw std::invalid_argument("train: empty training set");
  const auto& ds = *data.train;
  check_image_size(ds, model_cfg, "training");
  if (data.val) check_image_size(*data.val, model_cfg, "validation");

  // The teacher is frozen: adapt once, keep probabilities only. With alpha 0
  // it is ignored entirely so the run does not depend on it.
  Tensor teacher_probs;
  const auto active = data.adapter.active();
  if (cfg.loss.alpha > 0.0) {
    if (!data.teacher_logits.defined())
      throw std::invalid_argument("train: alpha > 0 requires teacher logits");
    if (data.teacher_logits.rank() != 2 || data.teacher_logits.dim(0) != ds.size() ||
        data.teacher_logits.dim(1) != kd::kNumTeacherLogits) {
      throw std::invalid_argument("train: teacher logits " + shape_str(data.teacher_logits.shape()) + " for " +
                                  std::to_string(ds.size()) + " samples");
    }
    kd::AdaptStats stats;
    teacher_probs = sigmoid(kd::adapt_teacher(data.teacher_logits, data.adapter, &stats));
  }

  TrainResult r{model::Model::build(model_cfg, cfg.seed), {}, {}, 0, 0};
  const auto named = r.model.parameters();
  std::vector<Tensor> params;
  for (const auto& [_, t] : named) {
    params.push_back(t);
    r.ema.push_back(t.detach());
  }

  AdamWState opt;
  const Schedule sched = cfg.schedule();
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  Batches batches{std::vector<std::size_t>(ds.size()), cfg.batch_size};
  const double steps_per_epoch = static_cast<double>(batches.count());
  std::size_t global = 0;
  bool stop = false;

  for (std::size_t epoch = 0; epoch < cfg.total_epochs && !stop; ++epoch) {
    std::iota(batches.order.begin(), batches.order.end(), 0);
    std::shuffle(batches.order.begin(), batches.order.end(), shuffle_rng);
    double loss_sum = 0.0, lr = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < batches.count(); ++b) {
      const auto idx = batches[b];
      auto [x, y] = ds.batch(idx);
      Tensor p;
      std::vector<double> w;
      if (teacher_probs.defined()) {
        p = rows_of(teacher_probs, idx);
        w = kd::dynamic_weights(p, active);
      }
      double loss_value = 0.0;
      try {
        Tape tape;
        TapeScope scope(tape);
        const Tensor loss = kd::loss_terms(r.model.forward(x), y, p, w, cfg.loss).total;
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) throw NumericError("loss is " + std::to_string(loss_value));
        r.model.zero_grad();
        tape.backward(loss);
      } catch (const NumericError& e) {
        std::ostringstream msg;
        msg << e.what() << " (epoch " << epoch + 1 << ", batch " << b << ", samples";
        for (auto i : idx) msg << ' ' << ds.ids[i];
        msg << ')';
        throw NumericError(msg.str());
      }
      clip_gradients(params, cfg.clip_norm);
      lr = cosine_lr(std::min(static_cast<double>(cfg.total_epochs),
                              static_cast<double>(epoch) + static_cast<double>(b + 1) / steps_per_epoch),
                     sched);
      if (adamw_step(params, opt, lr, cfg.weight_decay)) ema_update(r.ema, params, cfg.ema_decay);
      loss_sum += loss_value * static_cast<double>(idx.size());
      seen += idx.size();
      ++global;
      if (cfg.max_steps && global >= *cfg.max_steps) {
        stop = true;
        break;
      }
    }

    json line{{"epoch", epoch + 1},
              {"lr", lr},
              {"loss", loss_sum / static_cast<double>(seen)},
              {"steps", global},
              {"rejected_steps", opt.rejected}};
    if (data.val) {
      const auto ema_report = evaluate(r.ema_model(), *data.val).to_json();
      for (const auto& [k, v] : ema_report.items()) line[k == "loss" ? "val_loss" : k] = v;
      line["raw"] = evaluate(r.model, *data.val).to_json();
    }
    r.log.push_back(line);
    if (hooks.on_epoch) hooks.on_epoch(line);
  }
  r.steps = global;
  r.rejected_steps = opt.rejected;
  return r;
}

}  // namespace mxa::train
