#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace mxa::io {

// One CSV record; quoted fields may contain commas and doubled quotes.
std::vector<std::string> parse_csv_line(const std::string& line);

// Quotes a field containing commas. Quotes and newlines inside a field are rejected.
std::string csv_field(std::string_view value);

// Column index by exact header name, or -1.
std::ptrdiff_t column_index(const std::vector<std::string>& header, std::string_view name);

}  // namespace mxa::io
