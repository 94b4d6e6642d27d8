#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mxa/tensor.hpp"

namespace mxa {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // When set, only this many elements per input are probed, chosen by `seed`.
  std::optional<std::size_t> max_elements_per_input;
  std::uint64_t seed = 0;
};

struct GradCheckFailure {
  std::size_t input_index = 0;
  std::size_t element_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  std::string reason;
};

struct GradCheckReport {
  bool passed = true;
  double worst_rel_error = 0.0;
  std::size_t checked_elements = 0;
  std::vector<GradCheckFailure> failures;

  std::string summary() const;
};

// Compares tape gradients of `program` with central differences for every
// (or a sampled subset of) element of `inputs`. A non-scalar program result
// is summed. Per element the error is
//   |analytic - numeric| / max(1, |analytic|, |numeric|).
// `inputs` must be leaves with requires_grad set; their values are perturbed in
// place and restored.
GradCheckReport gradient_check(const std::function<Tensor()>& program, std::vector<Tensor> inputs,
                               const GradCheckOptions& options = {});

}  // namespace mxa
