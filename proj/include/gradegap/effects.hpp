#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "gradegap/eb.hpp"
#include "gradegap/gaps.hpp"
#include "gradegap/panel.hpp"
#include "gradegap/regression.hpp"
#include "json.hpp"

namespace gradegap {

// cohort -> score years left out of that cohort's treatment
using CohortExclusions = std::map<int, std::set<int>>;

// Years in which each cohort's students have score rows for the subject.
CohortExclusions exam_years_by_cohort(std::span<const ScoreObservation> obs, std::span<const StudentRecord> students,
                                      Subject subject);

struct LooOptions {
  Subject subject = Subject::math;
  GapCovariates covariates;
  std::size_t min_cell = 2;
  GapCovarianceMode mode = GapCovarianceMode::independent;
};

struct LooTreatment {
  std::optional<int> cohort;  // empty for the all-years estimate
  std::set<int> excluded;
  std::vector<TeacherGapEstimate> gaps;
  std::vector<PosteriorEstimate> posteriors;
  std::map<std::string, double> value;  // teacher -> (theta* - center) / scale
  double center = 0.0;  // unweighted mean of the posterior means
  double scale = 0.0;   // bias-corrected student-weighted SD of theta_hat
  std::vector<std::string> flags;
};

struct LooResult {
  std::vector<LooTreatment> cohorts;  // in cohort order
  LooTreatment all_years;             // for cohorts without an exclusion entry
  const LooTreatment& for_cohort(int cohort) const;
};

// obs must already be standardized. For each cohort the gap system is refit on
// the rows outside its excluded years, shrunk with the Gaussian prior and
// scaled by that fit's bias-corrected SD.
LooResult leave_one_year_out(std::span<const ScoreObservation> obs, std::span<const StudentRecord> students,
                             const CohortExclusions& exclusions, const LooOptions& options = {});

// Throws ValidationError if any treatment used a score year it excludes.
void check_loo_provenance(const LooResult& loo);

struct ExposureRow {
  std::string student_id;
  int grade = 8;
  int school_year = 0;
  Subject subject = Subject::math;
  std::string teacher_id;
  double treatment = 0.0;
  bool female = false;
  int cohort = 0;
  std::string school_id;
  std::string school_location;
  std::vector<double> covariates;  // aligned with EffectsSample::covariate_names
  std::set<int> provenance;        // score years behind the treatment
};

struct EffectsSample {
  std::vector<std::string> covariate_names;
  std::vector<ExposureRow> rows;
  std::vector<double> outcome;          // filled by the generators only
  std::map<std::string, double> truth;  // planted coefficients, generators only
  std::size_t excluded_no_treatment = 0;
};

struct ExposureOptions {
  Subject subject = Subject::math;
  std::set<int> grades = {8, 9, 10};
  bool teacher_traits = true;       // each also interacted with the student's gender
  bool group_means = true;          // classroom and school-grade lagged-score means
  bool interact_group_means = false;
};

// One row per score observation of the subject whose teacher has a treatment
// value for the student's cohort.
EffectsSample build_exposure(std::span<const ScoreObservation> obs, std::span<const StudentRecord> students,
                             std::span<const TeacherRecord> teachers, const LooResult& loo,
                             const ExposureOptions& options = {});

// Outcome records for every student with a projected graduation year.
std::map<std::string, OutcomeRecord> build_all_outcomes(const Panel& panel, const EverHorizon& horizon,
                                                        std::span<const AgeBin> bins, int spell_window = 1);

// max(1, last education event year - cohort) for every cohort in the panel.
EverHorizon default_ever_horizon(const Panel& panel);

// Same rows with the treatment taken from a teacher -> value map (for example
// standardized teacher IAT scores); rows whose teacher has no value are dropped.
EffectsSample replace_treatment(const EffectsSample& sample, const std::map<std::string, double>& by_teacher);

// Student-level outcome by name, aligned with the sample rows (NaN when
// undefined). Names: grad_on_time, grad_ever, college_{applied,admitted,
// enrolled}_{on_time,ever}, {employed_formal,earnings_uncond,earnings_cond,
// hours_uncond,hours_cond}@<age bin label>, student_iat.
std::vector<double> outcome_column(const EffectsSample& sample, const std::map<std::string, OutcomeRecord>& outcomes,
                                   std::span<const AgeBin> bins, std::span<const StudentIat> student_iat,
                                   const std::string& name);

enum class FixedEffect { cohort, grade, year, school, school_location, location_x_gender };
std::string_view to_string(FixedEffect f);
std::optional<FixedEffect> parse_fixed_effect(std::string_view s);

enum class ClusterSpec { school, student_school, location_x_gender };
std::string_view to_string(ClusterSpec c);
std::optional<ClusterSpec> parse_cluster(std::string_view s);

struct EffectsSpec {
  std::vector<FixedEffect> fixed_effects = {FixedEffect::cohort, FixedEffect::grade, FixedEffect::year,
                                            FixedEffect::school};
  ClusterSpec cluster = ClusterSpec::school;
  std::string treatment = "theta";  // label of the treatment column
  regress::DemeanOptions demean;
};

struct EffectsResult {
  std::string outcome;
  std::string treatment;
  std::vector<regress::Coefficient> coefficients;
  std::vector<std::string> names;  // order of cov
  Eigen::MatrixXd cov;
  double mean_female = 0.0;
  double mean_male = 0.0;
  std::size_t n = 0;
  std::vector<std::size_t> clusters;  // per cluster dimension
  std::string fixed_effects;
  std::string cluster;
  std::vector<std::string> dropped;
  std::vector<std::string> notices;
  bool cov_repaired = false;

  const regress::Coefficient* find(const std::string& name) const;
  std::string interaction_name() const { return treatment + "_x_female"; }
};

// Y on treatment x female, female, treatment and covariates with absorbed
// fixed effects and cluster-robust covariance. Rows with a NaN outcome are
// skipped.
EffectsResult estimate_effects(const EffectsSample& sample, std::span<const double> outcome,
                               const std::string& outcome_name, const EffectsSpec& spec = {});

// 0 at p = 0, +inf at p = 100, linear interpolation of the sorted reference
// in between.
double reference_quantile(std::span<const double> sorted_reference, double p);

struct PercentileEffect {
  double percentile = 0.0;
  double threshold = 0.0;
  EffectsResult result;
};

// Outcome 1{earnings > quantile_p(reference)} for each p in the grid.
std::vector<PercentileEffect> percentile_effects(const EffectsSample& sample, std::span<const double> earnings,
                                                 std::span<const double> reference, std::span<const double> grid,
                                                 const EffectsSpec& spec = {});

// Student IAT (z-scored over the regression sample) on the treatment with
// school and grade effects, clustered by school. Pass a sample whose
// treatment is the teacher IAT or the leave-out theta.
EffectsResult internalization(const EffectsSample& sample, std::span<const double> student_iat,
                              const std::string& treatment = "iat");

void write_effects(const std::filesystem::path& path, std::span<const EffectsResult> results, char delimiter = ',');
std::vector<EffectsResult> load_effects(const std::filesystem::path& path, char delimiter = ',');
nlohmann::json effects_report(const EffectsResult& r);
// Paper-style text block: coefficients with clustered SEs in parentheses,
// outcome means by gender and N.
std::string format_effects_table(std::span<const EffectsResult> columns);

}  // namespace gradegap
