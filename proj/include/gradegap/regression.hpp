#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace gradegap::regress {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Integer-coded grouping variable (fixed-effect dimension or cluster key).
// Codes are assigned in sorted key order so they never depend on row order.
struct Factor {
  std::string name;
  std::vector<int> codes;
  int levels = 0;

  static Factor from_keys(std::string name, const std::vector<std::string>& keys);
  static Factor from_ints(std::string name, const std::vector<long long>& keys);
  // Cross of two factors, e.g. school-location x gender.
  static Factor interact(const Factor& a, const Factor& b);
  std::size_t size() const { return codes.size(); }
  // True when every level of *this maps to a single level of outer.
  bool nested_in(const Factor& outer) const;
};

struct Design {
  Matrix x;
  std::vector<std::string> names;

  Design() = default;
  explicit Design(std::size_t rows) : x(static_cast<Eigen::Index>(rows), 0) {}
  void add(const std::string& name, const Vector& column);
  std::size_t rows() const { return static_cast<std::size_t>(x.rows()); }
  std::optional<std::size_t> index(const std::string& name) const;
};

struct DemeanOptions {
  double tol = 1e-10;
  int max_sweeps = 1000;
};

struct DemeanStats {
  int sweeps = 0;
  double max_group_mean = 0.0;
};

// Alternating weighted within-group demeaning over every factor, in place,
// until the largest within-group mean of any column falls below tol.
DemeanStats demean(Matrix& columns, const std::vector<Factor>& factors, const Vector& weights,
                   const DemeanOptions& options = {});

enum class CollinearPolicy { drop, error };

struct RegressionSpec {
  std::vector<Factor> fixed_effects;
  std::optional<Vector> weights;
  // Adds an explicit constant column when no fixed effect is absorbed.
  bool intercept = true;
  CollinearPolicy collinear = CollinearPolicy::drop;
  // Columns whose removal (absorbed or collinear) is an error even under drop.
  std::vector<std::string> required;
  DemeanOptions demean;
};

struct Fit {
  std::vector<std::string> names;  // estimated columns, in design order
  Vector coef;
  std::vector<std::string> dropped;
  Matrix x_within;  // demeaned design restricted to estimated columns
  Vector residuals;
  Vector weights;
  Matrix bread;  // (X'WX)^-1 on the demeaned design
  std::vector<Factor> fixed_effects;  // single-level dimensions removed
  std::size_t n = 0;
  double r2 = 0.0;
  double normal_eq_residual = 0.0;  // relative residual of the normal equations
  int demean_sweeps = 0;
  std::vector<std::string> notices;

  // Dropped columns report exactly zero.
  double coefficient(const std::string& name) const;
  std::optional<std::size_t> index(const std::string& name) const;
  // Degrees of freedom spent on absorbed effects that are not nested in any
  // of the given cluster dimensions.
  std::size_t absorbed_dof(const std::vector<const Factor*>& clusters = {}) const;
};

Fit fit(const Vector& y, const Design& design, const RegressionSpec& spec = {});

struct CovarianceResult {
  Matrix cov;
  std::size_t min_clusters = 0;
  bool repaired = false;  // negative eigenvalues truncated (two-way only)
  std::vector<std::string> warnings;
};

// Sum over clusters of s_g s_g' with s_g the within-cluster sum of row scores.
Matrix cluster_outer(const Matrix& row_scores, const Factor& cluster);

// One-way (one factor) or two-way (two factors, inclusion-exclusion) cluster
// robust covariance of fit.coef. Each dimension carries the finite-sample
// factor G/(G-1) * (N-1)/(N-K). Singleton clusters give HC1.
CovarianceResult cluster_covariance(const Fit& fit, const std::vector<Factor>& clusters,
                                    bool small_sample = true);

double t_critical(double level, double dof);
double two_sided_p(double t, double dof);

struct Coefficient {
  std::string name;
  double estimate = 0.0;
  double se = 0.0;
  double t = 0.0;
  double p = 1.0;
};

// Estimated columns with clustered SEs; p-values use min(G) - 1 dof.
std::vector<Coefficient> coefficient_table(const Fit& fit, const CovarianceResult& cov);

}  // namespace gradegap::regress
