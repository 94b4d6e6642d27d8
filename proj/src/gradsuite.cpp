#include "mxa/gradsuite.hpp"

#include <functional>
#include <random>

#include "mxa/attention.hpp"
#include "mxa/distill.hpp"
#include "mxa/model.hpp"
#include "mxa/mxa_block.hpp"
#include "mxa/ops.hpp"

namespace mxa::suite {

namespace {

Tensor rand_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0, bool grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), grad);
}

struct Case {
  std::string name;
  std::function<Tensor()> program;
  std::vector<Tensor> inputs;
};

// sum(f * w) for a fixed random w, so each output element gets its own weight.
std::function<Tensor()> contracted(std::function<Tensor()> f, std::mt19937_64& rng) {
  const Tensor probe = f();
  const Tensor w = rand_tensor(probe.shape(), rng, -1.0, 1.0, false);
  return [f = std::move(f), w] { return sum(mul(f(), w)); };
}

std::vector<Case> op_cases(std::mt19937_64& rng) {
  std::vector<Case> cases;
  auto add_case = [&](std::string name, std::function<Tensor()> f, std::vector<Tensor> in) {
    cases.push_back({std::move(name), contracted(std::move(f), rng), std::move(in)});
  };
  Tensor a = rand_tensor({2, 3, 4, 4}, rng), b = rand_tensor({2, 3, 4, 4}, rng);
  Tensor chan = rand_tensor({2, 3}, rng), loc = rand_tensor({2, 1, 4, 4}, rng);
  Tensor k3 = rand_tensor({2, 3, 3, 3}, rng), k2 = rand_tensor({2, 3, 2, 2}, rng), kb = rand_tensor({2}, rng);
  Tensor m1 = rand_tensor({2, 3, 4}, rng), m2 = rand_tensor({2, 4, 5}, rng), shared = rand_tensor({4, 5}, rng);
  Tensor bias = rand_tensor({5}, rng);
  Tensor boxes({2, 4}, {0.1, 0.2, 0.7, 0.9, 0.3, 0.05, 0.95, 0.6}, true);
  Tensor rows = rand_tensor({5, 3}, rng);
  Tensor logits = rand_tensor({3, 14}, rng, -4, 4);
  Tensor targets = rand_tensor({3, 14}, rng, 0, 1, false);
  Tensor raw = rand_tensor({3, 4}, rng, -2, 2);
  std::vector<double> w(14);
  for (auto& x : w) x = std::uniform_real_distribution<double>(0, 1)(rng);

  add_case("add", [=] { return add(a, b); }, {a, b});
  add_case("add_per_channel", [=] { return add(a, chan); }, {a, chan});
  add_case("mul_per_location", [=] { return mul(a, loc); }, {a, loc});
  add_case("sub", [=] { return sub(a, b); }, {a, b});
  add_case("mul", [=] { return mul(a, b); }, {a, b});
  add_case("add_constant", [=] { return add(a, 0.3); }, {a});
  add_case("scale", [=] { return scale(a, -1.7); }, {a});
  add_case("sigmoid", [=] { return sigmoid(scale(a, 3.0)); }, {a});
  add_case("relu", [=] { return relu(a); }, {a});
  add_case("softplus", [=] { return softplus(scale(a, 3.0)); }, {a});
  add_case("matmul_batched", [=] { return matmul(m1, m2); }, {m1, m2});
  add_case("matmul_shared", [=] { return matmul(m1, shared); }, {m1, shared});
  add_case("linear", [=] { return linear(m1, shared, bias); }, {m1, shared, bias});
  add_case("conv2d_pad1", [=] { return conv2d(a, k3, kb, 1, 1); }, {a, k3, kb});
  add_case("conv2d_stride2", [=] { return conv2d(a, k2, 2, 0); }, {a, k2});
  add_case("pool_global_avg", [=] { return pool(a, PoolKind::GlobalAvg); }, {a});
  add_case("pool_global_max", [=] { return pool(a, PoolKind::GlobalMax); }, {a});
  add_case("pool_channel_avg", [=] { return pool(a, PoolKind::ChannelAvg); }, {a});
  add_case("pool_channel_max", [=] { return pool(a, PoolKind::ChannelMax); }, {a});
  add_case("pool_window_avg", [=] { return pool(a, PoolKind::WindowAvg, 2); }, {a});
  add_case("bilinear_crop_resize", [=] { return bilinear_crop_resize(a, boxes, 5, 3); }, {a, boxes});
  add_case("sum", [=] { return sum(a); }, {a});
  add_case("sum_axis", [=] { return sum(a, 2); }, {a});
  add_case("mean", [=] { return mean(a); }, {a});
  add_case("mean_axis", [=] { return mean(a, 1); }, {a});
  add_case("concat", [=] {
    const std::vector<Tensor> parts{a, b};
    return concat(parts, 1);
  }, {a, b});
  add_case("reshape", [=] { return reshape(a, {6, 16}); }, {a});
  add_case("permute", [=] { return permute(a, {2, 0, 3, 1}); }, {a});
  add_case("transpose", [=] { return transpose(m1, 1, 2); }, {m1});
  add_case("slice", [=] { return slice(a, 3, 1, 3); }, {a});
  add_case("gather_rows", [=] {
    const std::vector<std::ptrdiff_t> idx{4, -1, 0, 4, 2};
    return gather_rows(rows, idx);
  }, {rows});
  add_case("softmax", [=] { return softmax(scale(m1, 2.0)); }, {m1});
  add_case("bcewl", [=] { return kd::bcewl(logits, targets); }, {logits});
  add_case("kd_soft_loss", [=] { return kd::kd_soft_loss(logits, targets, w); }, {logits});
  add_case("box_from_raw", [=] { return nn::box_from_raw(raw); }, {raw});

  // Attention and MXA components.
  auto attn = nn::AttentionParams::init(4, rng(), "attn");
  const nn::TokenGrid grid{rand_tensor({2, 9, 4}, rng), 3, 3};
  std::vector<Tensor> attn_in{grid.tokens, attn.qkv_weight, attn.qkv_bias, attn.out_weight, attn.out_bias};
  add_case("mhsa", [=] { return nn::mhsa(grid, nn::AttentionConfig(4, 2), attn).tokens; }, attn_in);
  add_case("windowed_mhsa", [=] { return nn::windowed_mhsa(grid, nn::AttentionConfig(4, 2, 2), attn).tokens; },
           attn_in);
  Tensor f1 = rand_tensor({2, 4, 3, 3}, rng), f2 = rand_tensor({2, 4, 3, 3}, rng);
  add_case("parallel_fuse", [=] { return nn::parallel_fuse(f1, f2); }, {f1, f2});
  Tensor feat = rand_tensor({2, 4, 6, 6}, rng);
  // Edges off the pixel lattice: bilinear sampling has kinks at integer coordinates.
  Tensor roi_boxes({2, 4}, {0.23, 0.11, 0.81, 0.67, 0.07, 0.33, 0.58, 0.96}, true);
  add_case("roi_pool", [=] { return nn::roi_pool(feat, roi_boxes); }, {feat, roi_boxes});
  auto roi = nn::RoiPredictorParams::init(4, rng(), "roi");
  add_case("predict_roi", [=] { return nn::predict_roi(feat, roi); },
           {feat, roi.conv1_weight, roi.conv1_bias, roi.conv2_weight, roi.conv2_bias, roi.fc_weight, roi.fc_bias});
  auto cbam = nn::CbamParams::init(4, 2, rng(), "cbam", 3);
  add_case("channel_attention", [=] { return nn::channel_attention(feat, cbam); }, {feat, cbam.w1, cbam.w2});
  add_case("spatial_attention", [=] { return nn::spatial_attention(feat, cbam); }, {feat, cbam.spatial_kernel});
  return cases;
}

Case mxa_case(std::mt19937_64& rng) {
  Tensor f = rand_tensor({1, 4, 8, 8}, rng);
  auto roi = nn::RoiPredictorParams::init(4, rng(), "roi");
  auto cbam = nn::CbamParams::init(4, 2, rng(), "cbam");
  return {"mxa_forward",
          contracted([=] { return nn::mxa_forward(f, roi, cbam); }, rng),
          {f, roi.conv1_weight, roi.conv1_bias, roi.conv2_weight, roi.conv2_bias, roi.fc_weight, roi.fc_bias,
           cbam.w1, cbam.w2, cbam.spatial_kernel}};
}

}  // namespace

std::vector<SuiteCheck> run_gradcheck_suite(Scope scope, std::span<const std::uint64_t> seeds,
                                            const SuiteOptions& opts) {
  std::vector<SuiteCheck> out;
  for (const auto seed : seeds) {
    std::mt19937_64 rng(seed);
    GradCheckOptions g{1e-5, opts.tolerance.value_or(1e-4), std::nullopt, seed};
    if (scope == Scope::Ops) {
      for (auto& c : op_cases(rng)) out.push_back({c.name, seed, gradient_check(c.program, c.inputs, g)});
    } else if (scope == Scope::Mxa) {
      auto c = mxa_case(rng);
      out.push_back({c.name, seed, gradient_check(c.program, c.inputs, g)});
    } else {
      const auto cfg = model::preset(opts.model_preset);
      const auto m = model::Model::build(cfg, seed);
      const std::size_t S = cfg.image_size;
      const Tensor images = rand_tensor({1, 1, S, S}, rng, 0.0, 1.0, false);
      Tensor y = rand_tensor({1, cfg.num_labels}, rng, 0.0, 1.0, false);
      for (auto& v : y.mutable_values()) v = v > 0.6 ? 1.0 : 0.0;
      std::vector<Tensor> params;
      for (const auto& [_, t] : m.parameters()) params.push_back(t);
      g.tolerance = opts.tolerance.value_or(1e-3);
      g.max_elements_per_input = opts.model_elements_per_tensor;
      out.push_back({"model_loss[" + cfg.name + "]", seed,
                     gradient_check([&] { return kd::bcewl(m.forward(images), y); }, params, g)});
    }
  }
  return out;
}

}  // namespace mxa::suite
