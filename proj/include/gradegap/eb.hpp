#pragma once

#include <Eigen/Dense>

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gradegap/gaps.hpp"
#include "gradegap/heterogeneity.hpp"

namespace gradegap {

struct GaussianPrior {
  double mu = 0.0;
  double phi2 = 0.0;
};

// mu = unweighted mean, phi2 = student-weighted bias-corrected variance.
GaussianPrior fit_gaussian_prior(const VarianceDecomposition& d, double phi2_floor = 1e-8);

enum class PriorKind { gaussian, deconvolved };
std::string_view to_string(PriorKind k);

struct PosteriorEstimate {
  std::string teacher_id;
  Subject subject = Subject::math;
  double theta_hat = 0.0;
  double se = 0.0;
  double theta_star = 0.0;
  double posterior_variance = 0.0;
  PriorKind prior = PriorKind::gaussian;
};

// theta* = (theta/s^2 + mu/phi2) / (1/s^2 + 1/phi2), variance (1/s^2 + 1/phi2)^-1.
std::vector<PosteriorEstimate> shrink(std::span<const TeacherGapEstimate> gaps, const GaussianPrior& prior);

struct GridSpec {
  double lo = -2.0;
  double hi = 1.0;
  int points = 241;
};

// Natural cubic spline with p + 1 equally spaced knots over the grid, constant
// dropped, columns centered and scaled to unit norm.
Eigen::VectorXd make_grid(const GridSpec& spec);
Eigen::MatrixXd spline_basis(const Eigen::VectorXd& grid, int p);

struct DiscretePrior {
  Eigen::VectorXd grid;
  Eigen::MatrixXd basis;
  Eigen::VectorXd alpha;
  Eigen::VectorXd g;
  Eigen::VectorXd g_se;  // empty unless requested
  double c0 = 0.0;
  double objective = 0.0;  // penalized log-likelihood at alpha
  int iterations = 0;
  bool converged = true;   // false when the iteration cap was hit
  double mean() const;
  double variance() const;
};

// g = softmax(Q alpha)
Eigen::VectorXd softmax_prior(const Eigen::MatrixXd& basis, const Eigen::VectorXd& alpha);

struct DeconvOptions {
  GridSpec grid;
  int basis_columns = 5;
  Eigen::MatrixXd basis;  // replaces the spline basis when non-empty (grid rows)
  double c0 = 1.0;
  int max_iterations = 500;
  double gradient_tol = 1e-8;
  bool standard_errors = false;
  // Called after every accepted iterate (also at the start).
  std::function<void(const Eigen::VectorXd& alpha, const Eigen::VectorXd& g, double objective)> on_iterate;
};

// Log-likelihood sum_j log sum_k g_k N(theta_j; grid_k, s_j^2), its gradient
// and Hessian in alpha. No penalty.
struct Likelihood {
  double value = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;
};
Likelihood deconv_loglik(const Eigen::VectorXd& alpha, const Eigen::MatrixXd& basis, const Eigen::VectorXd& grid,
                         std::span<const double> theta, std::span<const double> se, bool with_hessian = true);

DiscretePrior deconvolve(std::span<const TeacherGapEstimate> gaps, const DeconvOptions& options = {});
DiscretePrior deconvolve(std::span<const double> theta, std::span<const double> se, const DeconvOptions& options = {});

struct PenaltyScanPoint {
  double c0 = 0.0;
  double mean = 0.0;
  double variance = 0.0;
  double mean_error = 0.0;      // relative
  double variance_error = 0.0;  // relative
  double score = 0.0;           // sum of squared relative errors
  bool converged = true;
};

struct Calibration {
  double c0 = 0.0;
  DiscretePrior prior;
  std::vector<PenaltyScanPoint> scan;
};

// Default scan: 2^-4 .. 2^6 in 21 geometric steps.
std::vector<double> default_penalty_scan();

// Picks the c0 whose deconvolved mean and variance are closest to
// (mean, var_weighted); the mean error is scaled by max(|mean|, sd_weighted).
Calibration calibrate_penalty(std::span<const TeacherGapEstimate> gaps, const VarianceDecomposition& d,
                              const DeconvOptions& options = {}, std::span<const double> scan = {});

std::vector<PosteriorEstimate> posterior_mean_deconv(std::span<const TeacherGapEstimate> gaps,
                                                     const DiscretePrior& prior);

void write_posteriors(const std::filesystem::path& path, std::span<const PosteriorEstimate> rows, char delimiter = ',');
std::vector<PosteriorEstimate> load_posteriors(const std::filesystem::path& path, char delimiter = ',');
void write_density(const std::filesystem::path& path, const DiscretePrior& prior, char delimiter = ',');

}  // namespace gradegap
