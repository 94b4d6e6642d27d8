#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <sstream>

#include "mxa/gradcheck.hpp"
#include "mxa/ops.hpp"
#include "mxa/serialize.hpp"
#include "test_util.hpp"

using namespace mxa;
using mxa::testing::random_tensor;

namespace {

GradCheckReport check(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double tol = 1e-4) {
  GradCheckOptions opt;
  opt.tolerance = tol;
  return gradient_check(f, std::move(inputs), opt);
}

}  // namespace

TEST_CASE("elementwise basics") {
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(relu(Tensor::scalar(-3.2)).item() == 0.0);
  CHECK(relu(Tensor::scalar(3.2)).item() == 3.2);
  CHECK(std::isfinite(sigmoid(Tensor::scalar(-1000.0)).item()));
  CHECK(sigmoid(Tensor::scalar(-1000.0)).item() == 0.0);
  CHECK(sigmoid(Tensor::scalar(1000.0)).item() == 1.0);
  CHECK(softplus(Tensor::scalar(-800.0)).item() == doctest::Approx(0.0));
  CHECK(softplus(Tensor::scalar(800.0)).item() == 800.0);
}

TEST_CASE("sigmoid derivative at 2 agrees with central difference") {
  Tensor x = Tensor::scalar(2.0, true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sigmoid(x));
  }
  const double fd = mxa::testing::central_difference(x, 0, 1e-5, [&] { return sigmoid(x).item(); });
  CHECK(fd == doctest::Approx(0.10499358540350662).epsilon(1e-9));
  CHECK(x.grad()[0] == doctest::Approx(fd).epsilon(1e-9));
}

TEST_CASE("elementwise shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  try {
    (void)add(a, b);
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[3x2]") != std::string::npos);
  }
  CHECK_THROWS_AS((void)mul(Tensor::zeros({2, 3, 4, 4}), Tensor::zeros({2, 2})), std::invalid_argument);
}

TEST_CASE("per-channel and per-location broadcasting") {
  std::mt19937_64 rng(3);
  Tensor map = random_tensor({2, 3, 4, 4}, rng);
  Tensor gate_c = random_tensor({2, 3}, rng);
  Tensor gate_s = random_tensor({2, 1, 4, 4}, rng);
  Tensor yc = mul(map, gate_c);
  CHECK(yc.shape() == map.shape());
  CHECK(yc.value((1 * 3 + 2) * 16 + 5) == map.value((1 * 3 + 2) * 16 + 5) * gate_c.value(1 * 3 + 2));
  Tensor ys = mul(gate_s, map);
  CHECK(ys.value((1 * 3 + 2) * 16 + 5) == map.value((1 * 3 + 2) * 16 + 5) * gate_s.value(16 + 5));
  CHECK(check([&] { return mul(map, gate_c); }, {map, gate_c}).passed);
  CHECK(check([&] { return mul(map, gate_s); }, {map, gate_s}).passed);
  CHECK(check([&] { return sub(map, gate_s); }, {map, gate_s}).passed);
}

TEST_CASE("matmul examples") {
  std::mt19937_64 rng(1);
  Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor x = random_tensor({3, 3}, rng, -1, 1, false);
  Tensor y = matmul(eye, x);
  for (std::size_t i = 0; i < 9; ++i) CHECK(y.value(i) == x.value(i));

  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 1}, {5, 6});
  Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.value(0) == 17);
  CHECK(c.value(1) == 39);

  CHECK_THROWS_AS((void)matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), std::invalid_argument);
}

TEST_CASE("matmul gradient of sum equals ones times B transpose") {
  std::mt19937_64 rng(11);
  Tensor A = random_tensor({4, 5}, rng);
  Tensor B = random_tensor({5, 3}, rng);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(matmul(A, B)));
  }
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 5; ++k) {
      double expected = 0.0;
      for (std::size_t j = 0; j < 3; ++j) expected += B.value(k * 3 + j);
      const double fd = mxa::testing::central_difference(A, i * 5 + k, 1e-5, [&] { return sum(matmul(A, B)).item(); });
      CHECK(A.grad()[i * 5 + k] == doctest::Approx(expected).epsilon(1e-12));
      CHECK(fd == doctest::Approx(expected).epsilon(1e-8));
    }
  Tensor Ab = random_tensor({2, 3, 4}, rng);
  Tensor Bb = random_tensor({2, 4, 2}, rng);
  CHECK(check([&] { return matmul(Ab, Bb); }, {Ab, Bb}).passed);
  Tensor Bs = random_tensor({4, 2}, rng);
  CHECK(check([&] { return matmul(Ab, Bs); }, {Ab, Bs}).passed);
}

TEST_CASE("conv2d examples") {
  Tensor in({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor k1({1, 1, 1, 1}, {1.0});
  Tensor out = conv2d(in, k1, 1, 0);
  for (std::size_t i = 0; i < 9; ++i) CHECK(out.value(i) == in.value(i));

  Tensor hot = Tensor::zeros({1, 1, 5, 5});
  hot.mutable_values()[2 * 5 + 2] = 1.0;
  Tensor ones = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor plateau = conv2d(hot, ones, 1, 1);
  REQUIRE(plateau.shape() == Shape{1, 1, 5, 5});
  for (std::size_t h = 0; h < 5; ++h)
    for (std::size_t w = 0; w < 5; ++w) {
      const bool inside = h >= 1 && h <= 3 && w >= 1 && w <= 3;
      CHECK(plateau.value(h * 5 + w) == (inside ? 1.0 : 0.0));
    }

  CHECK_THROWS_AS((void)conv2d(Tensor::zeros({1, 1, 8, 8}), Tensor::zeros({1, 1, 3, 3}), 2, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)conv2d(Tensor::zeros({1, 2, 8, 8}), Tensor::zeros({1, 1, 3, 3}), 1, 1),
                  std::invalid_argument);
}

TEST_CASE("conv2d kernel gradient matches finite differences") {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({2, 3, 8, 8}, rng);
  Tensor k = random_tensor({4, 3, 3, 3}, rng);
  Tensor b = random_tensor({4}, rng);
  auto rep = check([&] { return conv2d(x, k, b, 1, 1); }, {x, k, b});
  CHECK_MESSAGE(rep.passed, rep.summary());
  Tensor k7 = random_tensor({1, 3, 7, 7}, rng);
  CHECK(check([&] { return conv2d(x, k7, 1, 3); }, {x, k7}).passed);
  Tensor k2 = random_tensor({5, 3, 2, 2}, rng);
  CHECK(check([&] { return conv2d(x, k2, 2, 0); }, {x, k2}).passed);
  Tensor x7 = random_tensor({1, 3, 7, 7}, rng);
  CHECK(check([&] { return conv2d(x7, k, 2, 1); }, {x7, k}).passed);
}

TEST_CASE("pooling") {
  Tensor c = Tensor::full({1, 2, 3, 3}, 1.75);
  Tensor g = pool(c, PoolKind::GlobalAvg);
  CHECK(g.shape() == Shape{1, 2, 1, 1});
  CHECK(g.value(0) == 1.75);
  CHECK(g.value(1) == 1.75);

  Tensor px({1, 3, 1, 1}, {1, -2, 3});
  CHECK(pool(px, PoolKind::ChannelMax).item() == 3.0);
  CHECK(pool(px, PoolKind::ChannelAvg).item() == doctest::Approx(2.0 / 3.0));

  std::mt19937_64 rng(7);
  Tensor x = random_tensor({1, 2, 6, 6}, rng);
  CHECK(check([&] { return pool(x, PoolKind::WindowAvg, 2); }, {x}).passed);
  CHECK(check([&] { return pool(x, PoolKind::WindowAvg, 3); }, {x}).passed);
  CHECK(check([&] { return pool(x, PoolKind::GlobalAvg); }, {x}).passed);
  CHECK(check([&] { return pool(x, PoolKind::GlobalMax); }, {x}).passed);
  CHECK(check([&] { return pool(x, PoolKind::ChannelMax); }, {x}).passed);
  CHECK(check([&] { return pool(x, PoolKind::ChannelAvg); }, {x}).passed);
}

TEST_CASE("max pooling routes gradient to the first maximum") {
  Tensor x({1, 1, 2, 2}, {5, 5, 1, 5}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(pool(x, PoolKind::GlobalMax)));
  }
  CHECK(x.grad()[0] == 1.0);
  CHECK(x.grad()[1] == 0.0);
  CHECK(x.grad()[3] == 0.0);

  Tensor y({1, 3, 1, 1}, {2, 2, 2}, true);
  Tape tape2;
  {
    TapeScope scope(tape2);
    tape2.backward(sum(pool(y, PoolKind::ChannelMax)));
  }
  CHECK(y.grad()[0] == 1.0);
  CHECK(y.grad()[1] == 0.0);
  CHECK(y.grad()[2] == 0.0);
}

TEST_CASE("bilinear crop resize: identity and corners") {
  std::mt19937_64 rng(9);
  Tensor x = random_tensor({2, 3, 5, 7}, rng);
  Tensor full({2, 4}, {0, 0, 1, 1, 0, 0, 1, 1});
  Tape tape;
  Tensor y;
  {
    TapeScope scope(tape);
    y = bilinear_crop_resize(x, full, 5, 7);
    std::vector<double> seed(y.numel());
    for (std::size_t i = 0; i < seed.size(); ++i) seed[i] = std::sin(1.0 + i);
    tape.backward(y, seed);
    for (std::size_t i = 0; i < seed.size(); ++i) CHECK(x.grad()[i] == seed[i]);
  }
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.value(i) == x.value(i));

  std::vector<double> ramp(16);
  for (std::size_t i = 0; i < 16; ++i) ramp[i] = static_cast<double>(i);
  Tensor r({1, 1, 4, 4}, ramp);
  Tensor corners = bilinear_crop_resize(r, Tensor({1, 4}, {0, 0, 1, 1}), 2, 2);
  CHECK(corners.value(0) == 0.0);
  CHECK(corners.value(1) == 3.0);
  CHECK(corners.value(2) == 12.0);
  CHECK(corners.value(3) == 15.0);

  CHECK_THROWS_AS((void)bilinear_crop_resize(r, Tensor({1, 4}, {0.5, 0, 0.5, 1}), 2, 2), std::invalid_argument);
  CHECK_THROWS_AS((void)bilinear_crop_resize(r, Tensor({1, 4}, {0, 0, 1, 1}), 1, 2), std::invalid_argument);
}

TEST_CASE("bilinear crop resize: box gradient matches finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(100 + seed);
    Tensor x = mxa::testing::smooth_map(1, 1, 8, 8, rng);
    std::uniform_real_distribution<double> u(0.05, 0.35);
    Tensor box({1, 4}, {u(rng), u(rng), 1.0 - u(rng), 1.0 - u(rng)}, true);
    GradCheckOptions opt;
    opt.step = 1e-4;
    opt.tolerance = 1e-3;
    auto rep = gradient_check([&] { return bilinear_crop_resize(x, box, 6, 5); }, {box}, opt);
    CHECK_MESSAGE(rep.passed, rep.summary());
    auto rep_in = check([&] { return bilinear_crop_resize(x, box, 6, 5); }, {x});
    CHECK_MESSAGE(rep_in.passed, rep_in.summary());
  }
}

TEST_CASE("reductions and shape ops") {
  CHECK(mean(Tensor({3}, {2, 4, 6})).item() == 4.0);
  Tensor a = Tensor::zeros({1, 2, 3, 3});
  Tensor b = Tensor::zeros({1, 2, 3, 3});
  std::vector<Tensor> parts{a, b};
  CHECK(concat(parts, 1).shape() == Shape{1, 4, 3, 3});
  CHECK_THROWS_AS((void)concat(std::vector<Tensor>{a, Tensor::zeros({1, 2, 3, 4})}, 1), std::invalid_argument);
  CHECK_THROWS_AS((void)sum(a, 4), std::invalid_argument);

  std::mt19937_64 rng(2);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(reshape(x, {4, 6})));
  }
  for (double g : x.grad()) CHECK(g == 1.0);

  CHECK(check([&] { return sum(x, 1); }, {x}).passed);
  CHECK(check([&] { return mean(x, 2); }, {x}).passed);
  CHECK(check([&] { return mul(permute(x, {2, 0, 1}), permute(x, {2, 0, 1})); }, {x}).passed);
  CHECK(check([&] { return mul(slice(x, 2, 1, 3), slice(x, 2, 1, 3)); }, {x}).passed);
  Tensor y = random_tensor({2, 1, 4}, rng);
  std::vector<Tensor> xy{x, y};
  CHECK(check([&] {
          Tensor c = concat(xy, 1);
          return mul(c, c);
        },
        {x, y})
            .passed);
  Tensor t = transpose(x, 0, 2);
  CHECK(t.shape() == Shape{4, 3, 2});
  CHECK(t.value((3 * 3 + 1) * 2 + 1) == x.value((1 * 3 + 1) * 4 + 3));
}

TEST_CASE("gather rows and softmax") {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({4, 3}, rng);
  const std::vector<std::ptrdiff_t> idx{2, -1, 0, 2};
  Tensor g = gather_rows(x, idx);
  CHECK(g.shape() == Shape{4, 3});
  CHECK(g.value(3) == 0.0);
  CHECK(g.value(0) == x.value(6));
  CHECK(check([&] { return mul(gather_rows(x, idx), gather_rows(x, idx)); }, {x}).passed);

  Tensor s = random_tensor({2, 5, 6}, rng, -3, 3);
  Tensor p = softmax(s);
  for (std::size_t r = 0; r < 10; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < 6; ++j) acc += p.value(r * 6 + j);
    CHECK(acc == doctest::Approx(1.0).epsilon(1e-12));
  }
  Tensor w = random_tensor({2, 5, 6}, rng, -1, 1, false);
  CHECK(check([&] { return mul(softmax(s), w); }, {s}).passed);
}

TEST_CASE("gradient_check behaviour") {
  Tensor x({2}, {1, 2}, true);
  GradCheckOptions opt;
  opt.tolerance = 1e-8;
  auto rep = gradient_check([&] { return mul(x, x); }, {x}, opt);
  CHECK(rep.passed);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));

  Tensor t = Tensor::scalar(30.0, true);
  auto sat = gradient_check([&] { return sigmoid(t); }, {t});
  CHECK(sat.passed);
  CHECK(t.grad()[0] == doctest::Approx(9.3480778673e-14).epsilon(1e-6));

  // Wrong rule: a program whose tape drops the dependence on x fails.
  Tensor z({2}, {0.5, -0.25}, true);
  auto broken = gradient_check(
      [&] {
        Tensor c = z.detach();
        NoGradGuard g;
        return mul(c, c);
      },
      {z});
  CHECK_FALSE(broken.passed);
  CHECK(broken.failures.size() == 2);

  Tensor inf_in({1}, {1.0}, true);
  auto nonfinite = gradient_check([&] { return scale(inf_in, INFINITY); }, {inf_in});
  CHECK_FALSE(nonfinite.passed);
}

TEST_CASE("every op passes gradient checks on five seeds") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor a = random_tensor({2, 3, 4, 4}, rng);
    Tensor b = random_tensor({2, 3, 4, 4}, rng);
    Tensor k = random_tensor({2, 3, 3, 3}, rng);
    Tensor w = random_tensor({4, 5}, rng);
    Tensor bias = random_tensor({5}, rng);
    std::vector<std::pair<const char*, GradCheckReport>> reports;
    reports.emplace_back("add", check([&] { return add(a, b); }, {a, b}));
    reports.emplace_back("sub", check([&] { return sub(a, b); }, {a, b}));
    reports.emplace_back("mul", check([&] { return mul(a, b); }, {a, b}));
    reports.emplace_back("sigmoid", check([&] { return sigmoid(a); }, {a}));
    reports.emplace_back("softplus", check([&] { return softplus(scale(a, 3.0)); }, {a}));
    reports.emplace_back("relu", check([&] { return mul(relu(a), b); }, {a, b}));
    reports.emplace_back("conv2d", check([&] { return conv2d(a, k, 1, 1); }, {a, k}));
    reports.emplace_back("linear", check([&] { return linear(a, w, bias); }, {a, w, bias}));
    reports.emplace_back("gmp", check([&] { return pool(a, PoolKind::GlobalMax); }, {a}));
    for (auto& [name, rep] : reports) CHECK_MESSAGE(rep.passed, name << " seed " << seed << ": " << rep.summary());
  }
}

TEST_CASE("tape semantics") {
  Tensor a({3}, {1, 2, 3}, true);
  Tensor b({3}, {4, 5, 6}, true);
  const std::vector<double> before_a(a.values().begin(), a.values().end());
  Tape tape;
  Tensor s;
  {
    TapeScope scope(tape);
    s = add(a, b);
    const std::vector<double> seed{0.5, -1.5, 2.0};
    tape.backward(s, seed);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(a.grad()[i] == seed[i]);
      CHECK(b.grad()[i] == seed[i]);
    }
    CHECK_THROWS_AS(tape.backward(s), std::invalid_argument);
  }
  CHECK(std::vector<double>(a.values().begin(), a.values().end()) == before_a);

  a.zero_grad();
  for (double g : a.grad()) CHECK(g == 0.0);

  Tensor x({2}, {0.3, -0.7}, true);
  Tape t2;
  Tensor loss;
  {
    TapeScope scope(t2);
    loss = sum(mul(sigmoid(x), x));
  }
  t2.backward(loss);
  CHECK(t2.last_backward_visits() == t2.size());
  const std::vector<double> once(x.grad().begin(), x.grad().end());
  t2.backward(loss);
  for (std::size_t i = 0; i < 2; ++i) CHECK(x.grad()[i] == 2.0 * once[i]);
}

TEST_CASE("no recording without a scope or gradient") {
  Tensor x({2}, {1, 2}, true);
  Tensor y = mul(x, x);
  CHECK(y.is_leaf());
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor c({2}, {1, 2});
    (void)mul(c, c);
    CHECK(tape.size() == 0);
    (void)mul(x, c);
    CHECK(tape.size() == 1);
  }
}

TEST_CASE("tensor container layout and round trip") {
  Tensor t({2, 3}, {1.5, -2, 3.25, 0, 1e-3, 7});
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "MXAT");
  CHECK(bytes.size() == 4 + 4 + 4 + 2 * 8 + 6 * 4);
  CHECK(static_cast<unsigned char>(bytes[4]) == 1);
  CHECK(static_cast<unsigned char>(bytes[8]) == 2);
  CHECK(static_cast<unsigned char>(bytes[12]) == 2);
  CHECK(static_cast<unsigned char>(bytes[20]) == 3);
  Tensor back = read_tensor(ss);
  CHECK(back.shape() == t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) CHECK(back.value(i) == static_cast<double>(static_cast<float>(t.value(i))));

  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<std::size_t> rank_d(0, 4), dim_d(1, 5);
    Shape shape(rank_d(rng));
    for (auto& d : shape) d = dim_d(rng);
    Tensor r = random_tensor(shape, rng, -1e6, 1e6, false);
    std::stringstream s2;
    write_tensor(s2, r, StoragePrecision::Float64);
    Tensor rb = read_tensor(s2);
    CHECK(rb.shape() == r.shape());
    for (std::size_t i = 0; i < r.numel(); ++i) CHECK(rb.value(i) == r.value(i));
  }

  std::stringstream bad("XXXX");
  CHECK_THROWS(read_tensor(bad));
}
