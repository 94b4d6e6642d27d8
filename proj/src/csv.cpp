#include "mxa/csv.hpp"

#include <algorithm>
#include <stdexcept>
#include <boost/tokenizer.hpp>

namespace mxa::io {

std::vector<std::string> parse_csv_line(const std::string& raw) {
  std::string line = raw;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  boost::escaped_list_separator<char> sep('\0', ',', '"');
  boost::tokenizer<boost::escaped_list_separator<char>> tok(line, sep);
  return {tok.begin(), tok.end()};
}

std::string csv_field(std::string_view value) {
  // The reader does not understand doubled quotes, so refuse to write them.
  if (value.find('"') != std::string_view::npos || value.find('\n') != std::string_view::npos) {
    throw std::invalid_argument("csv: field contains a quote or newline: " + std::string(value));
  }
  if (value.find(',') == std::string_view::npos) return std::string(value);
  return "\"" + std::string(value) + "\"";
}

std::ptrdiff_t column_index(const std::vector<std::string>& header, std::string_view name) {
  auto it = std::find(header.begin(), header.end(), name);
  return it == header.end() ? -1 : it - header.begin();
}

}  // namespace mxa::io
