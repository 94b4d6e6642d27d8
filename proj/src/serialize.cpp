#include "mxa/serialize.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace mxa {

namespace {

constexpr std::array<char, 4> kMagic = {'M', 'X', 'A', 'T'};
constexpr std::uint32_t kMaxRank = 16;

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  std::array<unsigned char, sizeof(T)> bytes;
  if (!in.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) {
    throw std::runtime_error("tensor container truncated");
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& tensor, StoragePrecision precision) {
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(precision));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
  for (auto d : tensor.shape()) put_le<std::uint64_t>(out, d);
  for (double v : tensor.values()) {
    if (precision == StoragePrecision::Float32) {
      put_le<float>(out, static_cast<float>(v));
    } else {
      put_le<double>(out, v);
    }
  }
  if (!out) throw std::runtime_error("failed writing tensor container");
}

Tensor read_tensor(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw std::runtime_error("not a tensor container (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(in);
  if (version != 1 && version != 2) {
    throw std::runtime_error("unsupported tensor container version " + std::to_string(version));
  }
  const auto rank = get_le<std::uint32_t>(in);
  if (rank > kMaxRank) throw std::runtime_error("tensor container rank too large");
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(get_le<std::uint64_t>(in));
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) {
    v = version == 1 ? static_cast<double>(get_le<float>(in)) : get_le<double>(in);
  }
  return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& tensor, StoragePrecision precision) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_tensor(out, tensor, precision);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_tensor(in);
}

}  // namespace mxa
