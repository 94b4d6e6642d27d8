#include "mxa/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "mxa/ops.hpp"

namespace mxa {

namespace {

double scalar_value(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.values()) acc += v;
  return acc;
}

}  // namespace

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "PASS" : "FAIL") << " checked=" << checked_elements << " worst_rel_err=" << worst_rel_error;
  for (std::size_t i = 0; i < std::min<std::size_t>(failures.size(), 5); ++i) {
    const auto& f = failures[i];
    os << "\n  input " << f.input_index << " element " << f.element_index << ": analytic=" << f.analytic
       << " numeric=" << f.numeric << " rel_err=" << f.rel_error;
    if (!f.reason.empty()) os << " (" << f.reason << ")";
  }
  return os.str();
}

GradCheckReport gradient_check(const std::function<Tensor()>& program, std::vector<Tensor> inputs,
                               const GradCheckOptions& options) {
  GradCheckReport report;
  for (auto& in : inputs) {
    if (!in.requires_grad() || !in.is_leaf()) {
      throw std::invalid_argument("gradient_check: inputs must be leaves that require grad");
    }
    in.zero_grad();
  }

  {
    Tape tape;
    TapeScope scope(tape);
    Tensor out = program();
    if (!all_finite(out)) {
      report.passed = false;
      report.failures.push_back({0, 0, 0.0, 0.0, INFINITY, "non-finite program output"});
      return report;
    }
    Tensor total = out.numel() == 1 ? out : sum(out);
    tape.backward(total);
  }

  std::mt19937_64 rng(options.seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    std::vector<std::size_t> elements(in.numel());
    std::iota(elements.begin(), elements.end(), 0);
    if (options.max_elements_per_input && *options.max_elements_per_input < elements.size()) {
      std::shuffle(elements.begin(), elements.end(), rng);
      elements.resize(*options.max_elements_per_input);
      std::sort(elements.begin(), elements.end());
    }
    const std::vector<double> analytic(in.grad().begin(), in.grad().end());
    auto values = in.mutable_values();
    for (std::size_t e : elements) {
      const double saved = values[e];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard guard;
        values[e] = saved + options.step;
        plus = scalar_value(program());
        values[e] = saved - options.step;
        minus = scalar_value(program());
        values[e] = saved;
      }
      ++report.checked_elements;
      const double a = analytic[e];
      if (!std::isfinite(plus) || !std::isfinite(minus) || !std::isfinite(a)) {
        report.passed = false;
        report.failures.push_back({k, e, a, NAN, INFINITY, "non-finite value"});
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      const double err = std::abs(a - numeric) / denom;
      report.worst_rel_error = std::max(report.worst_rel_error, err);
      if (err > options.tolerance) {
        report.passed = false;
        report.failures.push_back({k, e, a, numeric, err, {}});
      }
    }
  }
  return report;
}

}  // namespace mxa
