#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradegap/gaps.hpp"
#include "gradegap/panel.hpp"
#include "gradegap/regression.hpp"

namespace gradegap {

struct StudentWeightSummary {
  std::size_t students = 0;  // N = sum of N(j)
  double min = 0.0;
  double max = 0.0;
};

struct VarianceDecomposition {
  Subject subject = Subject::math;
  double mean = 0.0;            // unweighted mean of theta_hat
  double var_unweighted = 0.0;  // bias-corrected, floored at 0
  double var_weighted = 0.0;    // student-weighted, floored at 0
  double sd_unweighted = 0.0;
  double sd_weighted = 0.0;
  StudentWeightSummary weights;
  std::size_t n_teachers = 0;
  std::vector<std::string> flags;
};

// mean = J^-1 sum theta_j
// var_U = J^-1 sum [(theta_j - mean)^2 - s_j^2]
// var_W = sum w_j [(theta_j - mean)^2 - s_j^2], w_j = N(j)/N
// N(j) counts the teacher's student observations (n_female + n_male).
VarianceDecomposition variance_decomposition(std::span<const TeacherGapEstimate> gaps);

struct PredictorRegressionResult {
  std::vector<regress::Coefficient> coefficients;
  std::vector<std::string> dropped;  // covariates that could not be estimated
  std::string fixed_effects;
  std::string weighting;
  std::string cluster;
  double r2 = 0.0;
  std::size_t n = 0;
  std::size_t clusters = 0;
  std::size_t unmatched = 0;  // gaps without a usable predictor record
  std::vector<std::string> notices;

  const regress::Coefficient* find(const std::string& name) const;
};

enum class GapWeighting { inverse_variance, inverse_se, none };
std::string_view to_string(GapWeighting w);
std::optional<GapWeighting> parse_weighting(std::string_view s);

struct CharacteristicsSpec {
  GapWeighting weighting = GapWeighting::inverse_variance;
  bool demographics = true;        // female, age above median, university
  bool private_experience = false; // band dummies, "none" is the base
  bool public_experience = false;
  bool evaluation = false;         // eval z score and passed, with missing dummies
  bool school_fixed_effects = true;
};

// Teacher-level regression of theta_hat / sd_weighted on characteristics,
// clustered by school.
PredictorRegressionResult characteristics_regression(std::span<const TeacherGapEstimate> gaps,
                                                     std::span<const TeacherRecord> teachers,
                                                     const VarianceDecomposition& decomposition,
                                                     const CharacteristicsSpec& spec = {});

// One surveyed teacher's standardized IAT score and survey covariates.
struct TeacherIatRecord {
  std::string teacher_id;
  double iat = 0.0;  // standardized
  std::string school_location;
  std::map<std::string, std::string> categorical;  // dummies, first level is the base
  std::map<std::string, double> numeric;
};

struct IatRelationSpec {
  bool covariates = false;
  GapWeighting weighting = GapWeighting::none;
};

// theta_hat / sd_weighted on the IAT score with school-location fixed effects,
// clustered by school location.
PredictorRegressionResult iat_relation_regression(std::span<const TeacherGapEstimate> gaps,
                                                  std::span<const TeacherIatRecord> iat,
                                                  const VarianceDecomposition& decomposition,
                                                  const IatRelationSpec& spec = {});

struct CrossSubjectPair {
  Subject x = Subject::math;
  Subject y = Subject::language_arts;
  std::size_t teachers = 0;
  double slope = 0.0;
  double slope_se = 0.0;  // heteroskedasticity-robust
  double intercept = 0.0;
  double correlation = 0.0;
};

// Paired OLS of one subject's gap on another's over teachers observed in both.
std::vector<CrossSubjectPair> cross_subject_report(std::span<const TeacherGapEstimate> gaps);

}  // namespace gradegap
