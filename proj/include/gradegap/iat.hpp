#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gradegap {

enum class IatBlock { practice_compatible, test_compatible, practice_incompatible, test_incompatible };
std::string_view to_string(IatBlock b);
std::optional<IatBlock> parse_block(std::string_view s);

struct IatTrial {
  std::string respondent_id;
  IatBlock block = IatBlock::test_compatible;
  long long trial_index = 0;
  double latency_ms = 0.0;
  bool correct = true;
};

// Ordered by severity.
enum class IatCategory { preference_for_girls, little_to_none, slight, moderate_to_severe, strong };
std::string_view to_string(IatCategory c);

enum class PairMode { practice_and_test, test_only };
std::string_view to_string(PairMode m);
std::optional<PairMode> parse_pair_mode(std::string_view s);

struct IatOptions {
  double slow_ms = 10000.0;      // trials above are dropped
  double fast_ms = 300.0;
  double fast_share = 0.10;      // respondent discarded above this share of fast trials
  double error_penalty_ms = 600.0;
  std::size_t min_trials = 10;   // per block, after filtering
  PairMode pairs = PairMode::practice_and_test;
};

struct IatScore {
  std::string respondent_id;
  double d_score = 0.0;  // NaN when discarded
  IatCategory category = IatCategory::little_to_none;
  std::size_t n_trials_used = 0;
  std::size_t pairs_used = 0;
  PairMode pairs = PairMode::practice_and_test;  // as configured
  bool clamped = false;
  std::optional<std::string> discarded_reason;

  bool discarded() const { return discarded_reason.has_value(); }
};

// Scores one respondent's trials. A fast responder comes back as a discarded
// score; a missing or too thin test block throws ValidationError.
IatScore score_iat(std::span<const IatTrial> trials, const IatOptions& options = {});

// Groups by respondent (sorted id order) and scores each in parallel.
// Unscorable respondents are reported as discarded with reason "unscorable: ...".
std::vector<IatScore> score_all(std::span<const IatTrial> trials, const IatOptions& options = {});

// Left-closed intervals with breaks at -0.15, 0.15, 0.35, 0.65.
IatCategory classify(double d);

// z-scores with the population SD over non-discarded scores; NaN for the rest.
std::vector<double> standardize_iat(std::span<const IatScore> scores);

std::vector<IatTrial> load_trials(const std::filesystem::path& path, char delimiter = ',');
void write_trials(const std::filesystem::path& path, std::span<const IatTrial> trials, char delimiter = ',');
// Scored respondents with their standardized value; discarded ones go to the
// separate report.
void write_scores(const std::filesystem::path& path, std::span<const IatScore> scores, char delimiter = ',');
void write_discards(const std::filesystem::path& path, std::span<const IatScore> scores, char delimiter = ',');

}  // namespace gradegap
