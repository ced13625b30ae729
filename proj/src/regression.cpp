#include "gradegap/regression.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <limits>
#include <map>
#include <unordered_map>

#include "gradegap/error.hpp"

namespace gradegap::regress {

Factor Factor::from_keys(std::string name, const std::vector<std::string>& keys) {
  std::map<std::string, int> level;
  for (const auto& k : keys) level.emplace(k, 0);
  int next = 0;
  for (auto& [k, v] : level) v = next++;
  Factor f{std::move(name), {}, next};
  f.codes.reserve(keys.size());
  for (const auto& k : keys) f.codes.push_back(level.at(k));
  return f;
}

Factor Factor::from_ints(std::string name, const std::vector<long long>& keys) {
  std::map<long long, int> level;
  for (auto k : keys) level.emplace(k, 0);
  int next = 0;
  for (auto& [k, v] : level) v = next++;
  Factor f{std::move(name), {}, next};
  f.codes.reserve(keys.size());
  for (auto k : keys) f.codes.push_back(level.at(k));
  return f;
}

Factor Factor::interact(const Factor& a, const Factor& b) {
  std::vector<long long> keys(a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    keys[i] = static_cast<long long>(a.codes[i]) * b.levels + b.codes[i];
  return from_ints(a.name + "#" + b.name, keys);
}

bool Factor::nested_in(const Factor& outer) const {
  std::vector<int> owner(static_cast<std::size_t>(levels), -1);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    int& o = owner[static_cast<std::size_t>(codes[i])];
    if (o == -1)
      o = outer.codes[i];
    else if (o != outer.codes[i])
      return false;
  }
  return true;
}

void Design::add(const std::string& name, const Vector& column) {
  if (x.cols() > 0 && column.size() != x.rows())
    throw ValidationError(fmt::format("column '{}' has {} rows, design has {}", name, column.size(), x.rows()));
  if (x.cols() == 0 && x.rows() != column.size()) x.resize(column.size(), 0);
  x.conservativeResize(Eigen::NoChange, x.cols() + 1);
  x.col(x.cols() - 1) = column;
  names.push_back(name);
}

std::optional<std::size_t> Design::index(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  return std::nullopt;
}

DemeanStats demean(Matrix& columns, const std::vector<Factor>& factors, const Vector& weights,
                   const DemeanOptions& options) {
  DemeanStats stats;
  if (factors.empty() || columns.cols() == 0) return stats;
  const Eigen::Index n = columns.rows();
  const Eigen::Index k = columns.cols();

  std::vector<Vector> level_weight;
  for (const auto& f : factors) {
    Vector lw = Vector::Zero(f.levels);
    for (Eigen::Index i = 0; i < n; ++i) lw(f.codes[static_cast<std::size_t>(i)]) += weights(i);
    level_weight.push_back(std::move(lw));
  }

  Matrix sums;
  for (int sweep = 1; sweep <= options.max_sweeps; ++sweep) {
    double max_mean = 0.0;
    for (std::size_t fi = 0; fi < factors.size(); ++fi) {
      const auto& f = factors[fi];
      sums.setZero(f.levels, k);
      for (Eigen::Index i = 0; i < n; ++i)
        sums.row(f.codes[static_cast<std::size_t>(i)]) += weights(i) * columns.row(i);
      for (int l = 0; l < f.levels; ++l) {
        if (level_weight[fi](l) > 0.0) sums.row(l) /= level_weight[fi](l);
      }
      max_mean = std::max(max_mean, sums.cwiseAbs().maxCoeff());
      for (Eigen::Index i = 0; i < n; ++i) columns.row(i) -= sums.row(f.codes[static_cast<std::size_t>(i)]);
    }
    stats.sweeps = sweep;
    stats.max_group_mean = max_mean;
    if (max_mean < options.tol) return stats;
  }
  throw ConvergenceError(fmt::format("fixed-effect demeaning did not converge after {} sweeps (max group mean {:.3e})",
                                     options.max_sweeps, stats.max_group_mean));
}

double Fit::coefficient(const std::string& name) const {
  auto i = index(name);
  return i ? coef(static_cast<Eigen::Index>(*i)) : 0.0;
}

std::optional<std::size_t> Fit::index(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  return std::nullopt;
}

std::size_t Fit::absorbed_dof(const std::vector<const Factor*>& clusters) const {
  if (fixed_effects.empty()) return 0;
  std::size_t dof = 0;
  bool first = true;
  for (const auto& f : fixed_effects) {
    bool nested = false;
    for (const auto* c : clusters) nested = nested || f.nested_in(*c);
    if (nested) continue;
    dof += static_cast<std::size_t>(first ? f.levels : f.levels - 1);
    first = false;
  }
  // the absorbed constant still costs one degree of freedom
  return std::max<std::size_t>(dof, 1);
}

Fit fit(const Vector& y, const Design& design, const RegressionSpec& spec) {
  const Eigen::Index n = y.size();
  if (design.x.cols() > 0 && design.x.rows() != n)
    throw ValidationError("outcome and design row counts differ");
  Fit out;
  out.n = static_cast<std::size_t>(n);
  out.weights = spec.weights ? *spec.weights : Vector::Ones(n);
  if (out.weights.size() != n) throw ValidationError("weight vector length differs from outcome");
  if ((out.weights.array() < 0.0).any()) throw ValidationError("negative regression weights");

  for (const auto& f : spec.fixed_effects) {
    if (f.size() != static_cast<std::size_t>(n))
      throw ValidationError(fmt::format("fixed effect '{}' has wrong length", f.name));
    if (f.levels <= 1) {
      out.notices.push_back(fmt::format("fixed effect '{}' has a single level and was dropped", f.name));
      continue;
    }
    out.fixed_effects.push_back(f);
  }
  const bool absorbed = !out.fixed_effects.empty();

  std::vector<std::string> names = design.names;
  Matrix x = design.x;
  if (x.cols() == 0) x.resize(n, 0);
  if (!absorbed && spec.intercept) {
    Matrix with(n, x.cols() + 1);
    with.col(0).setOnes();
    with.rightCols(x.cols()) = x;
    x = std::move(with);
    names.insert(names.begin(), "(intercept)");
  }
  const Eigen::Index k_all = x.cols();
  const Vector& w = out.weights;

  // raw weighted sums of squares, for telling absorbed columns from small ones
  Vector raw_ss(k_all);
  for (Eigen::Index j = 0; j < k_all; ++j) raw_ss(j) = (w.array() * x.col(j).array().square()).sum();

  Matrix work(n, k_all + 1);
  work.col(0) = y;
  work.rightCols(k_all) = x;
  auto stats = demean(work, out.fixed_effects, w, spec.demean);
  out.demean_sweeps = stats.sweeps;
  const Vector y_t = work.col(0);
  const Matrix x_t = work.rightCols(k_all);

  const Matrix gram = x_t.transpose() * w.asDiagonal() * x_t;

  // Sequential Cholesky in design order; a column whose pivot vanishes is a
  // linear combination of the ones before it (or of the fixed effects).
  std::vector<Eigen::Index> kept;
  Matrix chol = Matrix::Zero(k_all, k_all);
  std::vector<std::string> reasons;
  std::size_t zero_columns = 0;
  for (Eigen::Index j = 0; j < k_all; ++j) {
    const double gjj = gram(j, j);
    std::string why;
    if (raw_ss(j) == 0.0) {
      why = "identically zero";
      ++zero_columns;
    } else if (gjj <= 1e-9 * raw_ss(j)) {
      why = absorbed ? "absorbed by fixed effects" : "collinear with intercept";
    } else {
      const auto m = static_cast<Eigen::Index>(kept.size());
      Vector z(m);
      for (Eigen::Index a = 0; a < m; ++a) {
        double s = gram(kept[static_cast<std::size_t>(a)], j);
        for (Eigen::Index b = 0; b < a; ++b) s -= chol(a, b) * z(b);
        z(a) = s / chol(a, a);
      }
      const double pivot = gjj - z.squaredNorm();
      if (pivot <= 1e-10 * gjj) {
        why = "collinear with earlier columns";
      } else {
        chol.row(m).head(m) = z.transpose();
        chol(m, m) = std::sqrt(pivot);
        kept.push_back(j);
        continue;
      }
    }
    out.dropped.push_back(names[static_cast<std::size_t>(j)]);
    reasons.push_back(fmt::format("{} ({})", names[static_cast<std::size_t>(j)], why));
  }

  if (!out.dropped.empty()) {
    // an all-zero column carries no information and is dropped under either policy
    if (spec.collinear == CollinearPolicy::error && out.dropped.size() > zero_columns)
      throw DegenerateError(fmt::format("rank-deficient design: {}", fmt::join(reasons, ", ")));
    for (const auto& r : spec.required)
      if (std::find(out.dropped.begin(), out.dropped.end(), r) != out.dropped.end())
        throw DegenerateError(fmt::format("regressor '{}' cannot be estimated: {}", r, fmt::join(reasons, ", ")));
    out.notices.push_back(fmt::format("dropped columns: {}", fmt::join(reasons, ", ")));
  }

  const auto k = static_cast<Eigen::Index>(kept.size());
  out.x_within.resize(n, k);
  for (Eigen::Index a = 0; a < k; ++a) {
    out.x_within.col(a) = x_t.col(kept[static_cast<std::size_t>(a)]);
    out.names.push_back(names[static_cast<std::size_t>(kept[static_cast<std::size_t>(a)])]);
  }
  const Matrix g = out.x_within.transpose() * w.asDiagonal() * out.x_within;
  const Vector rhs = out.x_within.transpose() * (w.array() * y_t.array()).matrix();
  if (k > 0) {
    Eigen::LLT<Matrix> llt(g);
    out.coef = llt.solve(rhs);
    // one step of iterative refinement keeps the normal-equation residual tight
    out.coef += llt.solve(rhs - g * out.coef);
    out.bread = llt.solve(Matrix::Identity(k, k));
    const double scale = std::max(rhs.norm(), std::numeric_limits<double>::min());
    out.normal_eq_residual = (g * out.coef - rhs).norm() / scale;
    if (out.normal_eq_residual > 1e-10)
      out.notices.push_back(fmt::format("normal equations residual {:.3e} exceeds 1e-10", out.normal_eq_residual));
  } else {
    out.coef.resize(0);
    out.bread.resize(0, 0);
  }
  out.residuals = y_t - out.x_within * out.coef;

  const double wsum = w.sum();
  const double ybar = wsum > 0 ? (w.array() * y.array()).sum() / wsum : 0.0;
  const double sst = (w.array() * (y.array() - ybar).square()).sum();
  const double ssr = (w.array() * out.residuals.array().square()).sum();
  out.r2 = sst > 0 ? 1.0 - ssr / sst : 0.0;
  return out;
}

Matrix cluster_outer(const Matrix& row_scores, const Factor& cluster) {
  Matrix sums = Matrix::Zero(cluster.levels, row_scores.cols());
  for (Eigen::Index i = 0; i < row_scores.rows(); ++i) sums.row(cluster.codes[static_cast<std::size_t>(i)]) += row_scores.row(i);
  return sums.transpose() * sums;
}

CovarianceResult cluster_covariance(const Fit& f, const std::vector<Factor>& clusters, bool small_sample) {
  if (clusters.empty() || clusters.size() > 2)
    throw ValidationError("cluster covariance needs one or two cluster dimensions");
  for (const auto& c : clusters)
    if (c.size() != f.n) throw ValidationError(fmt::format("cluster '{}' has wrong length", c.name));

  const auto k = f.coef.size();
  CovarianceResult out;
  out.cov = Matrix::Zero(k, k);
  if (k == 0) return out;

  Matrix scores = f.x_within;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) scores.row(i) *= f.weights(i) * f.residuals(i);

  std::vector<const Factor*> dims;
  for (const auto& c : clusters) dims.push_back(&c);
  const double n = static_cast<double>(f.n);
  const double k_total = static_cast<double>(k) + static_cast<double>(f.absorbed_dof(dims));

  auto term = [&](const Factor& c) {
    const double g = c.levels;
    double factor = 1.0;
    if (small_sample) {
      if (g > 1 && n > k_total)
        factor = g / (g - 1.0) * (n - 1.0) / (n - k_total);
      else
        out.warnings.push_back(fmt::format("cluster '{}': finite-sample factor undefined (G={}, N={}, K={})", c.name, g, n, k_total));
    }
    return Matrix(factor * f.bread * cluster_outer(scores, c) * f.bread);
  };

  out.min_clusters = static_cast<std::size_t>(clusters[0].levels);
  if (clusters.size() == 1) {
    out.cov = term(clusters[0]);
  } else {
    const Factor both = Factor::interact(clusters[0], clusters[1]);
    out.min_clusters = static_cast<std::size_t>(std::min(clusters[0].levels, clusters[1].levels));
    out.cov = term(clusters[0]) + term(clusters[1]) - term(both);
    out.cov = 0.5 * (out.cov + out.cov.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> eig(out.cov);
    if (eig.eigenvalues().minCoeff() < 0.0) {
      const Vector clipped = eig.eigenvalues().cwiseMax(0.0);
      out.cov = eig.eigenvectors() * clipped.asDiagonal() * eig.eigenvectors().transpose();
      out.repaired = true;
      out.warnings.push_back("two-way covariance had negative eigenvalues; truncated at zero");
    }
  }
  if (out.min_clusters < static_cast<std::size_t>(k))
    out.warnings.push_back(fmt::format("only {} clusters for {} parameters", out.min_clusters, k));
  return out;
}

double t_critical(double level, double dof) {
  const double p = 1.0 - (1.0 - level) / 2.0;
  if (!std::isfinite(dof) || dof > 1e6) return boost::math::quantile(boost::math::normal(), p);
  return boost::math::quantile(boost::math::students_t(dof), p);
}

double two_sided_p(double t, double dof) {
  const double a = std::abs(t);
  if (!std::isfinite(dof) || dof > 1e6) return 2.0 * boost::math::cdf(boost::math::complement(boost::math::normal(), a));
  return 2.0 * boost::math::cdf(boost::math::complement(boost::math::students_t(dof), a));
}

std::vector<Coefficient> coefficient_table(const Fit& f, const CovarianceResult& cov) {
  std::vector<Coefficient> out;
  const double dof = cov.min_clusters > 1 ? static_cast<double>(cov.min_clusters - 1) : 1.0;
  for (std::size_t j = 0; j < f.names.size(); ++j) {
    const auto i = static_cast<Eigen::Index>(j);
    Coefficient c;
    c.name = f.names[j];
    c.estimate = f.coef(i);
    c.se = std::sqrt(std::max(cov.cov(i, i), 0.0));
    c.t = c.se > 0 ? c.estimate / c.se : std::numeric_limits<double>::quiet_NaN();
    c.p = c.se > 0 ? two_sided_p(c.t, dof) : std::numeric_limits<double>::quiet_NaN();
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace gradegap::regress
