#include "gradegap/table.hpp"

#include <fmt/format.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "gradegap/error.hpp"

namespace gradegap {

namespace {

std::vector<std::string> split(std::string_view line, char delimiter) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delimiter, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(line.substr(start));
      break;
    }
    out.emplace_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace

std::optional<std::size_t> Table::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return i;
  return std::nullopt;
}

std::size_t Table::require_column(std::string_view name) const {
  auto c = column(name);
  if (!c) throw SchemaError(fmt::format("missing required column '{}'", name));
  return *c;
}

Table read_table(const std::filesystem::path& path, char delimiter) {
  std::ifstream in(path);
  if (!in) throw ValidationError(fmt::format("cannot open '{}'", path.string()));
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(fmt::format("'{}' has no header row", path.string()));
  if (!line.empty() && line.back() == '\r') line.pop_back();
  for (auto& h : split(line, delimiter)) t.header.emplace_back(trim(h));
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split(line, delimiter);
    for (auto& f : fields) f = std::string(trim(f));
    t.rows.push_back(std::move(fields));
  }
  return t;
}

void write_table(const std::filesystem::path& path, const Table& table, char delimiter) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError(fmt::format("cannot write '{}'", path.string()));
  const std::string sep(1, delimiter);
  out << fmt::format("{}\n", fmt::join(table.header, sep));
  for (const auto& r : table.rows) out << fmt::format("{}\n", fmt::join(r, sep));
}

std::string format_double(double v) {
  if (std::isnan(v)) return "NA";
  return fmt::format("{:.17g}", v);
}

std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (is_missing(s)) return std::nullopt;
  // from_chars for double is unavailable in older libstdc++; strtod on a copy
  std::string copy(s);
  char* end = nullptr;
  const double v = std::strtod(copy.c_str(), &end);
  if (end != copy.c_str() + copy.size()) return std::nullopt;
  return v;
}

std::optional<long long> parse_int(std::string_view s) {
  s = trim(s);
  long long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
  return v;
}

std::optional<bool> parse_bool(std::string_view s) {
  s = trim(s);
  if (s == "1" || s == "true" || s == "TRUE" || s == "T") return true;
  if (s == "0" || s == "false" || s == "FALSE" || s == "F") return false;
  return std::nullopt;
}

bool is_missing(std::string_view s) {
  s = trim(s);
  return s.empty() || s == "NA" || s == ".";
}

}  // namespace gradegap
