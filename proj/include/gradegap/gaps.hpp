#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "gradegap/panel.hpp"
#include "gradegap/regression.hpp"

namespace gradegap {

// Resolves a student's enrollment row for a school year, falling back to any
// row of that student (gender does not change across years).
class StudentIndex {
 public:
  explicit StudentIndex(std::span<const StudentRecord> students);
  const StudentRecord* find(const std::string& student_id, int school_year) const;

 private:
  std::map<std::pair<std::string, int>, const StudentRecord*> by_year_;
  std::map<std::string, const StudentRecord*> any_;
};

// Columns of W entering both score equations.
struct GapCovariates {
  bool lags = true;  // (z, z^2) for math, language and physical-education lags
  bool age_months = false;
  bool birthplace = false;
  // Columns left out of the blind-score equation only. Empty keeps the two
  // designs identical, which is the default.
  std::vector<std::string> blind_exclude;
};

// One equation of the system after absorbing teacher x gender cells.
struct EquationFit {
  std::vector<std::string> names;
  Eigen::VectorXd common;          // coefficients on W
  Eigen::VectorXd cell_effect;     // per cell: mean(y - W b)
  Eigen::MatrixXd cell_x_mean;     // cells x p
  Eigen::VectorXd residuals;
  Eigen::MatrixXd coef_influence;  // clusters x p: cluster sums of the coefficient influence
  double small_sample = 1.0;       // G/(G-1) (N-1)/(N-K)
};

struct SystemFit {
  Subject subject = Subject::math;
  std::vector<std::string> teachers;  // sorted ids; cell of (t, male) is 2t + male
  std::vector<int> n_female;
  std::vector<int> n_male;
  std::vector<std::set<int>> years;
  EquationFit blind;    // alpha: S^B equation
  EquationFit teacher;  // beta:  S^T equation
  std::vector<int> row_cell;
  std::vector<std::string> row_student;
  regress::Factor cluster;  // student
  std::vector<std::string> single_gender;  // teachers without both gender cells
  std::size_t rows_without_student = 0;
  std::vector<std::string> notices;

  // alpha_{1,j}: female-cell effect, alpha_{2,j}: male minus female.
  double alpha1(std::size_t t) const { return blind.cell_effect(static_cast<Eigen::Index>(2 * t)); }
  double alpha2(std::size_t t) const;
  double beta1(std::size_t t) const { return teacher.cell_effect(static_cast<Eigen::Index>(2 * t)); }
  double beta2(std::size_t t) const;
  bool has_both_cells(std::size_t t) const { return n_female[t] > 0 && n_male[t] > 0; }
};

SystemFit estimate_system(std::span<const ScoreObservation> obs, const StudentIndex& students, Subject subject,
                          const GapCovariates& covariates = {});

// Cluster-robust covariance of (alpha_f, alpha_m, beta_f, beta_m) cell effects
// for one teacher, clustered by student. Identical to the sandwich of the
// regression with explicit teacher x gender dummies.
Eigen::Matrix4d teacher_cell_covariance(const SystemFit& fit, std::size_t teacher);

struct ContrastCovariance {
  std::string teacher_id;
  double var_alpha2 = 0.0;
  double var_beta2 = 0.0;
  double cov_alpha2_beta2 = 0.0;
  std::size_t clusters = 0;  // students touching this teacher's cells
};

struct ContrastReport {
  std::vector<ContrastCovariance> contrasts;  // teachers with both cells
  std::vector<std::string> warnings;
};

ContrastReport cluster_robust_cov(const SystemFit& fit);

struct TeacherGapEstimate {
  std::string teacher_id;
  Subject subject = Subject::math;
  double theta_hat = 0.0;
  double se = 0.0;
  int n_female = 0;
  int n_male = 0;
  std::set<int> years_used;
};

struct GapResult {
  std::vector<TeacherGapEstimate> gaps;
  std::size_t omitted_min_cell = 0;
  std::vector<std::string> warnings;
};

enum class GapCovarianceMode {
  independent,  // s_j^2 = se(beta2)^2 + se(alpha2)^2
  joint,        // subtracts 2 cov(alpha2, beta2)
};

GapResult teacher_gaps(const SystemFit& fit, std::size_t min_cell = 2,
                       GapCovarianceMode mode = GapCovarianceMode::independent);

struct SureFit {
  SystemFit system;
  Eigen::Matrix2d residual_cov;  // (blind, teacher)
  double residual_corr = 0.0;
  bool identical_designs = true;
};

// Joint estimation allowing correlated errors across the two equations.
// With identical designs the point estimates are the equation-by-equation
// ones; otherwise feasible GLS on the cell-demeaned system.
SureFit sure_fit(std::span<const ScoreObservation> obs, const StudentIndex& students, Subject subject,
                 const GapCovariates& covariates = {});

struct VaCorrelationReport {
  Subject subject = Subject::math;
  std::array<std::string, 3> labels{"assessment_gap", "va_female", "va_male"};
  Eigen::Matrix3d correlation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d sd = Eigen::Vector3d::Zero();
  Eigen::Matrix3d raw_cov = Eigen::Matrix3d::Zero();
  Eigen::Matrix3d mean_sampling_cov = Eigen::Matrix3d::Zero();
  std::size_t teachers = 0;
  std::vector<std::string> flags;
};

// Per-teacher parameters (theta, VA_f, VA_m) and their sampling covariance.
struct TeacherVa {
  std::string teacher_id;
  Eigen::Vector3d value;
  Eigen::Matrix3d sampling_cov;
};

std::vector<TeacherVa> teacher_va(const SureFit& sure, std::size_t min_cell = 2);

// Raw moment matrix of the per-teacher vectors minus the mean sampling
// covariance, then scaled to correlations. Weights default to equal.
VaCorrelationReport va_correlation_report(std::span<const TeacherVa> teachers, Subject subject,
                                          std::span<const double> weights = {});

void write_gaps(const std::filesystem::path& path, std::span<const TeacherGapEstimate> gaps, char delimiter = ',');
std::vector<TeacherGapEstimate> load_gaps(const std::filesystem::path& path, char delimiter = ',');

}  // namespace gradegap
