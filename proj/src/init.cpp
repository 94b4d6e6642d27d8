#include "mxa/init.hpp"

#include <cmath>
#include <random>

namespace mxa::nn {

std::uint64_t parameter_stream(std::uint64_t seed, std::string_view path) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : path) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  // splitmix64 finalizer over the combined value
  std::uint64_t z = h ^ (seed + 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor uniform_parameter(Shape shape, std::size_t fan_in, std::uint64_t seed, std::string_view path) {
  std::mt19937_64 rng(parameter_stream(seed, path));
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = dist(rng);
  return Tensor(std::move(shape), std::move(values), true);
}

}  // namespace mxa::nn
