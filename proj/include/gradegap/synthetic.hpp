#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gradegap/effects.hpp"
#include "gradegap/iat.hpp"
#include "gradegap/panel.hpp"
#include "json.hpp"

namespace gradegap {

// Philox4x32-10 counter-based generator.
struct Philox4x32 {
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;
  static Counter block(Counter ctr, Key key);
};

inline constexpr const char* kRngName = "philox4x32-10";

// One independent stream per (seed, purpose, entity). Draws from one entity
// never shift when entities are added or removed.
class RandomStream {
 public:
  using result_type = std::uint32_t;
  RandomStream(std::uint64_t seed, std::uint32_t purpose, std::uint64_t entity);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return 0xffffffffu; }
  result_type operator()();

  double uniform();  // (0, 1), 53 bits
  double normal();   // Box-Muller
  bool bernoulli(double p) { return uniform() < p; }

 private:
  Philox4x32::Key key_;
  Philox4x32::Counter ctr_;
  Philox4x32::Counter buf_{};
  int used_ = 4;
  std::optional<double> spare_;
};

enum class PriorShape { gaussian, mixture, point_mass };
std::string_view to_string(PriorShape s);

struct MixtureComponent {
  double weight = 1.0;
  double mean = 0.0;
  double sd = 0.0;
};

struct ThetaPrior {
  PriorShape shape = PriorShape::gaussian;
  double mean = -0.2978;  // gaussian centre or point mass location
  double sd = 0.0973;
  std::vector<MixtureComponent> components;

  double population_mean() const;
  double population_variance() const;
};

struct OutcomeDgp {
  // P(graduate ever) = d0 + d1 theta_std F + d2 F + d3 theta_std + d_lag lag
  double d0 = 0.8;
  double d1 = -0.0151;
  double d2 = 0.05;
  double d3 = 0.0;
  double d_lag = 0.05;
  double on_time_share = 0.8;  // of graduates
  // P(formal job in a year after graduation), same index structure
  double e0 = 0.3;
  double e1 = -0.02;
  double e2 = -0.05;
  double e3 = 0.0;
  int labor_years = 5;
  double log_earnings_mean = 5.5;
  double log_earnings_sd = 0.5;
  // mixes an unobserved student trait into both teacher assignment and outcomes
  bool confounded = false;
  double confounding = 0.0;
};

struct IatDgp {
  bool enabled = true;
  double teacher_mean = 0.301;
  double teacher_sd = 0.35;
  double theta_loading = 0.0;  // on standardized theta
  int trials_per_block = 30;
  // student latent = n1 T F + n2 F + n3 T + school + noise with unit variance,
  // T = standardized teacher D; the reported D is mean + scale * latent
  double n1 = 0.20;
  double n2 = 0.0;
  double n3 = 0.0;
  double school_sd = 0.2;
  double student_mean = 0.2;
  double student_scale = 0.35;
};

struct DgpConfig {
  std::optional<std::uint64_t> seed;  // mandatory
  std::size_t teachers = 100;
  std::size_t students_per_teacher = 40;
  std::size_t teachers_per_school = 2;
  std::size_t schools_per_location = 5;
  Subject subject = Subject::math;
  std::vector<int> years = {2015, 2016, 2018, 2019};
  int exam_grade = 8;
  double female_share = 0.5;
  ThetaPrior prior;
  double ability_sd = 0.8;
  double female_effect = 0.1;     // on both scores
  double lag_noise_sd = 0.5;      // lagged score = ability + noise
  double lag_effect = 0.6;        // lagged math on both scores
  double va_sd = 0.1;
  double va_gender_corr = 0.8;
  double va_theta_corr = 0.0;
  double blind_noise_sd = 0.5;
  double teacher_noise_sd = 0.5;
  double error_corr = 0.0;        // between the two score noises
  // Scores are generated in SD units and flagged standardized. With
  // raw_points they go out on a 0-20 style scale and need z-scoring.
  bool raw_points = false;
  OutcomeDgp outcome;
  IatDgp iat;

  void validate() const;  // throws ValidationError
  static DgpConfig from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;
};

struct GroundTruth {
  std::uint64_t seed = 0;
  std::map<std::string, double> theta;       // per teacher, SD units
  std::map<std::string, double> theta_std;   // (theta - prior mean) / prior sd, 0 for a point mass
  std::map<std::string, double> teacher_iat; // true D
  double prior_mean = 0.0;
  double prior_variance = 0.0;
  double sample_mean = 0.0;
  double sample_variance = 0.0;  // population formula over the drawn teachers
  Eigen::Matrix3d va_correlation = Eigen::Matrix3d::Identity();  // sample, (theta, va_f, va_m)
  nlohmann::json to_json(const DgpConfig& config) const;
};

struct SyntheticData {
  Panel panel;
  std::vector<IatTrial> iat_trials;
  GroundTruth truth;
};

SyntheticData generate(const DgpConfig& config);

// panel tables, iat_trials.csv, truth.json and config.json
void write_synthetic(const std::filesystem::path& dir, const SyntheticData& data, const DgpConfig& config);

struct IatLatencyModel {
  double shift_ms = 350.0;
  double log_mean = 6.0;  // of the log-normal part
  double log_sd = 0.4;
  int trials_per_block = 30;
  double error_rate = 0.0;

  double base_sd() const;  // SD of one block's latencies
};

// Trials whose compatible and incompatible blocks differ by the offset that
// makes the population D equal target. |target| >= 2 is infeasible.
std::vector<IatTrial> generate_iat(const std::string& respondent, double target, const IatLatencyModel& model,
                                   RandomStream& rng);

// Oracle sample for the long-run regressions: students stacked over grades,
// nested in schools, with a per-row linear probability outcome.
struct EffectsDgp {
  std::optional<std::uint64_t> seed;
  std::size_t students = 2000;
  std::size_t schools = 100;
  std::vector<int> grades = {8, 9, 10};
  std::vector<int> cohorts = {2015, 2016, 2017, 2018, 2019};
  std::size_t teachers_per_school_grade = 2;
  double d0 = 0.6, d1 = -0.0151, d2 = 0.05, d3 = 0.0, d_x = 0.05;
  double student_sd = 0.1;  // persistent across a student's rows
  double school_sd = 0.1;
  bool binary = true;  // thresholded uniform; otherwise index plus normal noise
  double noise_sd = 0.3;
};

EffectsSample generate_effects_sample(const EffectsDgp& config);

}  // namespace gradegap
