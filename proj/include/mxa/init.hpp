#pragma once

#include <cstdint>
#include <string_view>

#include "mxa/tensor.hpp"

namespace mxa::nn {

// Stable 64-bit hash of a parameter path, mixed with the model seed. Each
// parameter draws from its own stream, so adding or removing a submodule does
// not shift the initialization of the others.
std::uint64_t parameter_stream(std::uint64_t seed, std::string_view path);

// Uniform in [-sqrt(1/fan_in), sqrt(1/fan_in)], requires_grad set.
Tensor uniform_parameter(Shape shape, std::size_t fan_in, std::uint64_t seed, std::string_view path);

}  // namespace mxa::nn
