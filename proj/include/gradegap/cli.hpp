#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace gradegap::cli {

inline constexpr const char* kToolName = "gradegap";
inline constexpr const char* kVersion = "0.1.0";

// Everything a subcommand reads besides its input files. Flags override the
// matching keys of the --config document.
struct RunConfig {
  std::string subcommand;
  std::filesystem::path in;
  std::filesystem::path out;
  std::filesystem::path config;
  std::filesystem::path schema;
  std::filesystem::path iat;    // teacher IAT scores file
  std::filesystem::path panel;  // teacher records for hetero
  std::string subject = "math";
  std::string method = "gaussian";
  bool calibrate = false;
  std::optional<double> c0;
  int basis_columns = 5;
  std::string cluster = "school";
  std::string fixed_effects = "cohort,grade,year,school";
  std::string pairs = "practice_and_test";
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  nlohmann::json options = nlohmann::json::object();  // parsed --config

  nlohmann::json to_json() const;
};

// Exit codes: 0 success, 1 validation error or bad usage, 2 internal error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

std::string sha256_file(const std::filesystem::path& path);

}  // namespace gradegap::cli
