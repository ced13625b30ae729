#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace gradegap {

// A delimited text table held as strings. No quoting: fields never contain
// the delimiter in any of the formats this library reads or writes.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> column(std::string_view name) const;
  std::size_t require_column(std::string_view name) const;
};

Table read_table(const std::filesystem::path& path, char delimiter = ',');
void write_table(const std::filesystem::path& path, const Table& table, char delimiter = ',');

// 17 significant digits so values survive a write/read cycle bit-exactly.
std::string format_double(double v);

std::optional<double> parse_double(std::string_view s);
std::optional<long long> parse_int(std::string_view s);
std::optional<bool> parse_bool(std::string_view s);

// Empty, "NA" and "." all denote a missing value.
bool is_missing(std::string_view s);

}  // namespace gradegap
