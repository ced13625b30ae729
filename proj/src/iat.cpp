#include "gradegap/iat.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>

#include "gradegap/error.hpp"
#include "gradegap/parallel.hpp"
#include "gradegap/table.hpp"

namespace gradegap {

namespace {

constexpr std::array<std::string_view, 4> kBlockNames = {"practice_compatible", "test_compatible",
                                                         "practice_incompatible", "test_incompatible"};
constexpr std::array<std::string_view, 5> kCategoryNames = {"preference_for_girls", "little_to_none", "slight",
                                                            "moderate_to_severe", "strong"};

struct Block {
  std::vector<double> latency;  // after penalty, sorted
  std::size_t raw = 0;
};

// Sorting first makes every sum independent of trial order.
double sum(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

double pair_d(const Block& compatible, const Block& incompatible) {
  const double nc = static_cast<double>(compatible.latency.size());
  const double ni = static_cast<double>(incompatible.latency.size());
  const double mc = sum(compatible.latency) / nc;
  const double mi = sum(incompatible.latency) / ni;
  std::vector<double> all = compatible.latency;
  all.insert(all.end(), incompatible.latency.begin(), incompatible.latency.end());
  std::sort(all.begin(), all.end());
  const double m = sum(all) / static_cast<double>(all.size());
  double ss = 0.0;
  for (double x : all) ss += (x - m) * (x - m);
  const double sd = std::sqrt(ss / static_cast<double>(all.size()));
  if (!(sd > 0.0)) throw DegenerateError("IAT block pair has zero latency variance");
  return (mi - mc) / sd;
}

}  // namespace

std::string_view to_string(IatBlock b) { return kBlockNames[static_cast<std::size_t>(b)]; }

std::optional<IatBlock> parse_block(std::string_view s) {
  for (std::size_t i = 0; i < kBlockNames.size(); ++i)
    if (kBlockNames[i] == s) return static_cast<IatBlock>(i);
  return std::nullopt;
}

std::string_view to_string(IatCategory c) { return kCategoryNames[static_cast<std::size_t>(c)]; }

std::string_view to_string(PairMode m) { return m == PairMode::test_only ? "test_only" : "practice_and_test"; }

std::optional<PairMode> parse_pair_mode(std::string_view s) {
  if (s == "test_only") return PairMode::test_only;
  if (s == "practice_and_test") return PairMode::practice_and_test;
  return std::nullopt;
}

IatCategory classify(double d) {
  if (d < -0.15) return IatCategory::preference_for_girls;
  if (d < 0.15) return IatCategory::little_to_none;
  if (d < 0.35) return IatCategory::slight;
  if (d < 0.65) return IatCategory::moderate_to_severe;
  return IatCategory::strong;
}

IatScore score_iat(std::span<const IatTrial> trials, const IatOptions& options) {
  IatScore out;
  out.pairs = options.pairs;
  if (trials.empty()) throw ValidationError("IAT respondent has no trials");
  out.respondent_id = trials.front().respondent_id;

  std::array<std::vector<const IatTrial*>, 4> kept;
  std::size_t retained = 0, fast = 0;
  for (const IatTrial& t : trials) {
    if (t.respondent_id != out.respondent_id)
      throw ValidationError(fmt::format("IAT trials mix respondents {} and {}", out.respondent_id, t.respondent_id));
    if (!(t.latency_ms > 0.0) || !std::isfinite(t.latency_ms))
      throw ValidationError(fmt::format("IAT respondent {}: latency must be positive", out.respondent_id));
    if (t.latency_ms > options.slow_ms) continue;
    ++retained;
    if (t.latency_ms < options.fast_ms) ++fast;
    kept[static_cast<std::size_t>(t.block)].push_back(&t);
  }
  if (retained > 0 && static_cast<double>(fast) > options.fast_share * static_cast<double>(retained)) {
    out.d_score = std::numeric_limits<double>::quiet_NaN();
    out.discarded_reason = "fast-responder";
    return out;
  }

  std::array<Block, 4> blocks;
  for (std::size_t b = 0; b < 4; ++b) {
    std::vector<double> correct;
    for (const IatTrial* t : kept[b])
      if (t->correct) correct.push_back(t->latency_ms);
    std::sort(correct.begin(), correct.end());
    const std::size_t errors = kept[b].size() - correct.size();
    blocks[b].raw = kept[b].size();
    if (kept[b].empty()) continue;
    if (correct.empty())
      throw ValidationError(fmt::format("IAT respondent {}: block {} has no correct trials", out.respondent_id,
                                        kBlockNames[b]));
    const double penalty = sum(correct) / static_cast<double>(correct.size()) + options.error_penalty_ms;
    blocks[b].latency = std::move(correct);
    blocks[b].latency.insert(blocks[b].latency.end(), errors, penalty);
    std::sort(blocks[b].latency.begin(), blocks[b].latency.end());
  }

  auto usable = [&](IatBlock b) { return blocks[static_cast<std::size_t>(b)].raw >= options.min_trials; };
  for (IatBlock b : {IatBlock::test_compatible, IatBlock::test_incompatible})
    if (!usable(b))
      throw ValidationError(fmt::format("IAT respondent {}: block {} has {} usable trials, need {}",
                                        out.respondent_id, to_string(b),
                                        blocks[static_cast<std::size_t>(b)].raw, options.min_trials));

  auto at = [&](IatBlock b) -> const Block& { return blocks[static_cast<std::size_t>(b)]; };
  double d = pair_d(at(IatBlock::test_compatible), at(IatBlock::test_incompatible));
  out.pairs_used = 1;
  out.n_trials_used = at(IatBlock::test_compatible).raw + at(IatBlock::test_incompatible).raw;
  if (options.pairs == PairMode::practice_and_test) {
    // a missing or thin practice pair leaves the test pair alone
    if (usable(IatBlock::practice_compatible) && usable(IatBlock::practice_incompatible)) {
      const double dp = pair_d(at(IatBlock::practice_compatible), at(IatBlock::practice_incompatible));
      d = 0.5 * (d + dp);
      out.pairs_used = 2;
      out.n_trials_used += at(IatBlock::practice_compatible).raw + at(IatBlock::practice_incompatible).raw;
    }
  }
  if (d > 2.0 || d < -2.0) {
    out.clamped = true;
    d = std::clamp(d, -2.0, 2.0);
  }
  out.d_score = d;
  out.category = classify(d);
  return out;
}

std::vector<IatScore> score_all(std::span<const IatTrial> trials, const IatOptions& options) {
  std::map<std::string, std::vector<IatTrial>> by_id;
  for (const IatTrial& t : trials) by_id[t.respondent_id].push_back(t);
  std::vector<const std::vector<IatTrial>*> groups;
  for (const auto& [id, v] : by_id) groups.push_back(&v);
  std::vector<IatScore> out(groups.size());
  parallel_for(groups.size(), [&](std::size_t i) {
    try {
      out[i] = score_iat(*groups[i], options);
    } catch (const ValidationError& e) {
      out[i] = IatScore{};
      out[i].respondent_id = groups[i]->front().respondent_id;
      out[i].pairs = options.pairs;
      out[i].d_score = std::numeric_limits<double>::quiet_NaN();
      out[i].discarded_reason = fmt::format("unscorable: {}", e.what());
    }
  });
  return out;
}

std::vector<double> standardize_iat(std::span<const IatScore> scores) {
  double n = 0.0, s = 0.0;
  for (const IatScore& x : scores)
    if (!x.discarded()) {
      n += 1.0;
      s += x.d_score;
    }
  if (n < 2.0) throw DegenerateError("standardizing IAT scores needs at least two scored respondents");
  const double m = s / n;
  double ss = 0.0;
  for (const IatScore& x : scores)
    if (!x.discarded()) ss += (x.d_score - m) * (x.d_score - m);
  const double sd = std::sqrt(ss / n);
  if (!(sd > 0.0)) throw DegenerateError("IAT scores have zero variance");
  std::vector<double> z(scores.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (!scores[i].discarded()) z[i] = (scores[i].d_score - m) / sd;
  return z;
}

std::vector<IatTrial> load_trials(const std::filesystem::path& path, char delimiter) {
  const Table t = read_table(path, delimiter);
  const std::size_t c_id = t.require_column("respondent_id"), c_block = t.require_column("block"),
                    c_idx = t.require_column("trial_index"), c_lat = t.require_column("latency_ms"),
                    c_ok = t.require_column("correct");
  std::vector<IatTrial> out;
  out.reserve(t.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    auto bad = [&](std::string_view what, std::size_t col) {
      return SchemaError(fmt::format("{} row {}: bad {} '{}'", path.string(), r + 2, what, row[col]));
    };
    IatTrial x;
    x.respondent_id = row[c_id];
    if (x.respondent_id.empty()) throw SchemaError(fmt::format("{} row {}: empty respondent_id", path.string(), r + 2));
    auto b = parse_block(row[c_block]);
    if (!b) throw bad("block", c_block);
    x.block = *b;
    auto idx = parse_int(row[c_idx]);
    if (!idx) throw bad("trial_index", c_idx);
    x.trial_index = *idx;
    auto lat = parse_double(row[c_lat]);
    if (!lat || !(*lat > 0.0)) throw bad("latency_ms", c_lat);
    x.latency_ms = *lat;
    auto ok = parse_bool(row[c_ok]);
    if (!ok) throw bad("correct", c_ok);
    x.correct = *ok;
    out.push_back(std::move(x));
  }
  return out;
}

void write_trials(const std::filesystem::path& path, std::span<const IatTrial> trials, char delimiter) {
  Table t;
  t.header = {"respondent_id", "block", "trial_index", "latency_ms", "correct"};
  for (const IatTrial& x : trials)
    t.rows.push_back({x.respondent_id, std::string(to_string(x.block)), std::to_string(x.trial_index),
                      format_double(x.latency_ms), x.correct ? "1" : "0"});
  write_table(path, t, delimiter);
}

void write_scores(const std::filesystem::path& path, std::span<const IatScore> scores, char delimiter) {
  const std::vector<double> z = standardize_iat(scores);
  Table t;
  t.header = {"respondent_id", "d_score", "category", "n_trials_used", "pairs_used", "clamped", "iat_std",
              "pair_mode"};
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const IatScore& s = scores[i];
    if (s.discarded()) continue;
    t.rows.push_back({s.respondent_id, format_double(s.d_score), std::string(to_string(s.category)),
                      std::to_string(s.n_trials_used), std::to_string(s.pairs_used), s.clamped ? "1" : "0",
                      format_double(z[i]), std::string(to_string(s.pairs))});
  }
  write_table(path, t, delimiter);
}

void write_discards(const std::filesystem::path& path, std::span<const IatScore> scores, char delimiter) {
  Table t;
  t.header = {"respondent_id", "reason"};
  for (const IatScore& s : scores)
    if (s.discarded()) {
      std::string reason = *s.discarded_reason;
      std::replace(reason.begin(), reason.end(), delimiter, ';');
      t.rows.push_back({s.respondent_id, reason});
    }
  write_table(path, t, delimiter);
}

}  // namespace gradegap
