#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "mxa/tensor.hpp"

namespace mxa {

// Binary tensor container:
//   "MXAT" | version u32 | rank u32 | rank x u64 dims | little-endian values
// Version 1 stores IEEE-754 binary32 values, version 2 binary64.
enum class StoragePrecision : std::uint32_t { Float32 = 1, Float64 = 2 };

void write_tensor(std::ostream& out, const Tensor& tensor,
                  StoragePrecision precision = StoragePrecision::Float32);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& tensor,
                 StoragePrecision precision = StoragePrecision::Float32);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace mxa
