#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mxa/gradcheck.hpp"

namespace mxa::suite {

enum class Scope { Ops, Mxa, Model };

struct SuiteCheck {
  std::string name;
  std::uint64_t seed = 0;
  GradCheckReport report;
};

struct SuiteOptions {
  // Ops and MXA use 1e-4 and the model 1e-3 unless overridden.
  std::optional<double> tolerance;
  std::string model_preset = "M5-nano-8x8";
  // Elements probed per parameter tensor in the model scope.
  std::size_t model_elements_per_tensor = 3;
};

// Central-difference checks (h = 1e-5) of every engine op, of mxa_forward end
// to end, or of the model's BCE loss, once per seed. Non-scalar outputs are
// contracted with a fixed random tensor first.
std::vector<SuiteCheck> run_gradcheck_suite(Scope scope, std::span<const std::uint64_t> seeds,
                                            const SuiteOptions& opts = {});

}  // namespace mxa::suite
