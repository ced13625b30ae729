#include "gradegap/gaps.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "gradegap/error.hpp"
#include "gradegap/parallel.hpp"
#include "gradegap/table.hpp"

namespace gradegap {

using Eigen::Index;
using regress::Design;
using regress::Factor;
using regress::Matrix;
using regress::Vector;

StudentIndex::StudentIndex(std::span<const StudentRecord> students) {
  for (const auto& s : students) {
    by_year_[{s.student_id, s.school_year}] = &s;
    any_.emplace(s.student_id, &s);
  }
}

const StudentRecord* StudentIndex::find(const std::string& student_id, int school_year) const {
  if (auto it = by_year_.find({student_id, school_year}); it != by_year_.end()) return it->second;
  if (auto it = any_.find(student_id); it != any_.end()) return it->second;
  return nullptr;
}

double SystemFit::alpha2(std::size_t t) const {
  return blind.cell_effect(static_cast<Index>(2 * t + 1)) - blind.cell_effect(static_cast<Index>(2 * t));
}

double SystemFit::beta2(std::size_t t) const {
  return teacher.cell_effect(static_cast<Index>(2 * t + 1)) - teacher.cell_effect(static_cast<Index>(2 * t));
}

namespace {

struct Prepared {
  SystemFit fit;
  Vector y_blind;
  Vector y_teacher;
  Design w_blind;
  Design w_teacher;
  Factor cells;
  std::vector<long long> cell_keys;
  std::vector<std::vector<std::size_t>> teacher_rows;
};

Prepared prepare(std::span<const ScoreObservation> obs, const StudentIndex& students, Subject subject,
                 const GapCovariates& cov) {
  Prepared p;
  SystemFit& fit = p.fit;
  fit.subject = subject;

  struct Row {
    const ScoreObservation* o;
    const StudentRecord* s;
  };
  std::vector<Row> rows;
  for (const auto& o : obs) {
    if (o.subject != subject) continue;
    const auto* s = students.find(o.student_id, o.school_year);
    if (!s) {
      ++fit.rows_without_student;
      continue;
    }
    rows.push_back({&o, s});
  }
  if (rows.empty()) throw ValidationError(fmt::format("no usable score rows for subject {}", to_string(subject)));
  if (fit.rows_without_student > 0)
    fit.notices.push_back(fmt::format("{} score rows had no matching student record", fit.rows_without_student));

  std::map<std::string, std::size_t> teacher_index;
  for (const auto& r : rows) teacher_index.emplace(r.o->teacher_id, 0);
  for (auto& [id, idx] : teacher_index) {
    idx = fit.teachers.size();
    fit.teachers.push_back(id);
  }
  const std::size_t n_teachers = fit.teachers.size();
  fit.n_female.assign(n_teachers, 0);
  fit.n_male.assign(n_teachers, 0);
  fit.years.assign(n_teachers, {});
  p.teacher_rows.assign(n_teachers, {});

  const auto n = static_cast<Index>(rows.size());
  p.y_blind.resize(n);
  p.y_teacher.resize(n);
  auto& cell_keys = p.cell_keys;
  cell_keys.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const std::size_t t = teacher_index.at(r.o->teacher_id);
    const int male = r.s->female ? 0 : 1;
    cell_keys[i] = static_cast<long long>(2 * t + static_cast<std::size_t>(male));
    fit.row_cell.push_back(static_cast<int>(cell_keys[i]));
    fit.row_student.push_back(r.o->student_id);
    (male ? fit.n_male[t] : fit.n_female[t])++;
    fit.years[t].insert(r.o->school_year);
    p.teacher_rows[t].push_back(i);
    p.y_blind(static_cast<Index>(i)) = r.o->blind_score;
    p.y_teacher(static_cast<Index>(i)) = r.o->teacher_score;
  }
  for (std::size_t t = 0; t < n_teachers; ++t)
    if (!fit.has_both_cells(t)) fit.single_gender.push_back(fit.teachers[t]);

  // cells are coded directly so that cell index 2t+male is also the factor level
  p.cells.name = "teacher_x_gender";
  p.cells.levels = static_cast<int>(2 * n_teachers);
  p.cells.codes.assign(fit.row_cell.begin(), fit.row_cell.end());
  fit.cluster = Factor::from_keys("student", fit.row_student);

  Design w(rows.size());
  auto add_lag = [&](const char* name, double ScoreObservation::*field) {
    Vector z(n), z2(n), miss(n);
    Index n_missing = 0;
    for (Index i = 0; i < n; ++i) {
      const double v = rows[static_cast<std::size_t>(i)].o->*field;
      const bool m = std::isnan(v);
      n_missing += m ? 1 : 0;
      z(i) = m ? 0.0 : v;
      z2(i) = z(i) * z(i);
      miss(i) = m ? 1.0 : 0.0;
    }
    if (n_missing == n) return;  // lag never observed for this subject
    w.add(name, z);
    w.add(fmt::format("{}_sq", name), z2);
    if (n_missing > 0) w.add(fmt::format("{}_missing", name), miss);
  };
  if (cov.lags) {
    add_lag("lag_math", &ScoreObservation::lagged_math);
    add_lag("lag_language", &ScoreObservation::lagged_language);
    add_lag("lag_physed", &ScoreObservation::lagged_physed);
  }
  if (cov.age_months) {
    Vector age(n);
    for (Index i = 0; i < n; ++i) age(i) = rows[static_cast<std::size_t>(i)].s->age_months;
    w.add("age_months", age);
  }
  if (cov.birthplace) {
    std::set<std::string> codes;
    for (const auto& r : rows) codes.insert(r.s->birthplace_code);
    // first code is the reference category
    for (auto it = std::next(codes.begin()); it != codes.end(); ++it) {
      Vector d(n);
      for (Index i = 0; i < n; ++i) d(i) = rows[static_cast<std::size_t>(i)].s->birthplace_code == *it ? 1.0 : 0.0;
      w.add(fmt::format("birthplace_{}", *it), d);
    }
  }
  p.w_teacher = w;
  for (const auto& name : cov.blind_exclude)
    if (!w.index(name)) throw ValidationError(fmt::format("blind_exclude names unknown covariate '{}'", name));
  Design wb(rows.size());
  for (std::size_t j = 0; j < w.names.size(); ++j)
    if (std::find(cov.blind_exclude.begin(), cov.blind_exclude.end(), w.names[j]) == cov.blind_exclude.end())
      wb.add(w.names[j], w.x.col(static_cast<Index>(j)));
  p.w_blind = wb;
  return p;
}

Matrix kept_columns(const Design& d, const std::vector<std::string>& names) {
  Matrix out(static_cast<Index>(d.rows()), static_cast<Index>(names.size()));
  for (std::size_t j = 0; j < names.size(); ++j) out.col(static_cast<Index>(j)) = d.x.col(static_cast<Index>(*d.index(names[j])));
  return out;
}

// Cell effects by back-substitution and the cluster-level influence of the
// common coefficients. influence_rows holds per-row coefficient influence.
void finish_equation(EquationFit& eq, const Prepared& p, const Design& design, const Vector& y,
                     const Matrix& influence_rows, std::size_t absorbed_dof) {
  const Matrix x = kept_columns(design, eq.names);
  const Index cells = p.cells.levels;
  const Index k = x.cols();
  const Vector adjusted = y - x * eq.common;
  Vector sum = Vector::Zero(cells);
  Vector count = Vector::Zero(cells);
  eq.cell_x_mean = Matrix::Zero(cells, k);
  for (Index i = 0; i < y.size(); ++i) {
    const int c = p.cells.codes[static_cast<std::size_t>(i)];
    sum(c) += adjusted(i);
    count(c) += 1.0;
    eq.cell_x_mean.row(c) += x.row(i);
  }
  eq.cell_effect.resize(cells);
  for (Index c = 0; c < cells; ++c) {
    if (count(c) > 0) {
      eq.cell_effect(c) = sum(c) / count(c);
      eq.cell_x_mean.row(c) /= count(c);
    } else {
      eq.cell_effect(c) = std::numeric_limits<double>::quiet_NaN();
    }
  }
  const Factor& cl = p.fit.cluster;
  eq.coef_influence = Matrix::Zero(cl.levels, k);
  for (Index i = 0; i < influence_rows.rows(); ++i)
    eq.coef_influence.row(cl.codes[static_cast<std::size_t>(i)]) += influence_rows.row(i);

  const double n = static_cast<double>(y.size());
  const double g = cl.levels;
  const double k_total = static_cast<double>(k) + static_cast<double>(absorbed_dof);
  eq.small_sample = (g > 1 && n > k_total) ? g / (g - 1.0) * (n - 1.0) / (n - k_total) : 1.0;
}

regress::RegressionSpec cell_spec(const Prepared& p) {
  regress::RegressionSpec spec;
  // compacted coding so empty single-gender cells do not count as absorbed levels
  spec.fixed_effects = {Factor::from_ints(p.cells.name, p.cell_keys)};
  spec.collinear = regress::CollinearPolicy::error;
  return spec;
}

EquationFit ols_equation(const Prepared& p, const Design& design, const Vector& y, regress::Fit* keep = nullptr) {
  auto f = regress::fit(y, design, cell_spec(p));
  EquationFit eq;
  eq.names = f.names;
  eq.common = f.coef;
  eq.residuals = f.residuals;
  Matrix infl = f.x_within;
  for (Index i = 0; i < infl.rows(); ++i) infl.row(i) *= f.residuals(i);
  infl = infl * f.bread;  // bread is symmetric
  finish_equation(eq, p, design, y, infl, f.absorbed_dof({&p.fit.cluster}));
  if (keep) *keep = std::move(f);
  return eq;
}

struct Meat {
  Matrix bb, tt, bt;
};

Meat meats(const SystemFit& fit) {
  return {fit.blind.coef_influence.transpose() * fit.blind.coef_influence,
          fit.teacher.coef_influence.transpose() * fit.teacher.coef_influence,
          fit.blind.coef_influence.transpose() * fit.teacher.coef_influence};
}

// rows of each teacher, rebuilt from row_cell
std::vector<std::vector<std::size_t>> rows_by_teacher(const SystemFit& fit) {
  std::vector<std::vector<std::size_t>> out(fit.teachers.size());
  for (std::size_t i = 0; i < fit.row_cell.size(); ++i) out[static_cast<std::size_t>(fit.row_cell[i] / 2)].push_back(i);
  return out;
}

Eigen::Matrix4d cell_covariance(const SystemFit& fit, std::size_t t, const std::vector<std::size_t>& rows,
                                const Meat& meat) {
  const EquationFit* eqs[2] = {&fit.blind, &fit.teacher};
  const Index cells[2] = {static_cast<Index>(2 * t), static_cast<Index>(2 * t + 1)};
  const double counts[2] = {static_cast<double>(fit.n_female[t]), static_cast<double>(fit.n_male[t])};

  // u: direct cell-mean part of the influence, summed per cluster
  std::map<int, Eigen::Vector4d> u;
  for (auto i : rows) {
    const int g = fit.cluster.codes[i];
    const int male = fit.row_cell[i] & 1;
    auto& v = u.try_emplace(g, Eigen::Vector4d::Zero()).first->second;
    v(male) += fit.blind.residuals(static_cast<Index>(i)) / counts[male];
    v(2 + male) += fit.teacher.residuals(static_cast<Index>(i)) / counts[male];
  }
  // v: common-coefficient part, x_bar_k' * influence_g
  auto xbar = [&](int a) -> Vector { return eqs[a / 2]->cell_x_mean.row(cells[a % 2]).transpose(); };
  std::array<Vector, 4> xb;
  for (int a = 0; a < 4; ++a) xb[static_cast<std::size_t>(a)] = xbar(a);
  auto meat_of = [&](int ea, int eb) -> Matrix {
    if (ea == 0 && eb == 0) return meat.bb;
    if (ea == 1 && eb == 1) return meat.tt;
    if (ea == 0) return meat.bt;
    return meat.bt.transpose();
  };

  Eigen::Matrix4d out = Eigen::Matrix4d::Zero();
  for (const auto& [g, ug] : u) {
    Eigen::Vector4d vg;
    for (int a = 0; a < 4; ++a) {
      const auto& infl = eqs[a / 2]->coef_influence;
      vg(a) = infl.cols() > 0 ? infl.row(g).dot(xb[static_cast<std::size_t>(a)]) : 0.0;
    }
    out += ug * ug.transpose() - ug * vg.transpose() - vg * ug.transpose();
  }
  for (int a = 0; a < 4; ++a) {
    for (int b = 0; b < 4; ++b) {
      const auto& xa = xb[static_cast<std::size_t>(a)];
      const auto& xbb = xb[static_cast<std::size_t>(b)];
      if (xa.size() > 0 && xbb.size() > 0) out(a, b) += xa.dot(meat_of(a / 2, b / 2) * xbb);
      out(a, b) *= std::sqrt(eqs[a / 2]->small_sample * eqs[b / 2]->small_sample);
    }
  }
  return out;
}

}  // namespace

SystemFit estimate_system(std::span<const ScoreObservation> obs, const StudentIndex& students, Subject subject,
                          const GapCovariates& covariates) {
  Prepared p = prepare(obs, students, subject, covariates);
  p.fit.blind = ols_equation(p, p.w_blind, p.y_blind);
  p.fit.teacher = ols_equation(p, p.w_teacher, p.y_teacher);
  return std::move(p.fit);
}

Eigen::Matrix4d teacher_cell_covariance(const SystemFit& fit, std::size_t teacher) {
  if (teacher >= fit.teachers.size()) throw ValidationError("teacher index out of range");
  if (!fit.has_both_cells(teacher))
    throw ValidationError(fmt::format("teacher '{}' lacks one gender cell", fit.teachers[teacher]));
  const auto rows = rows_by_teacher(fit);
  return cell_covariance(fit, teacher, rows[teacher], meats(fit));
}

namespace {

ContrastCovariance contrast_from(const Eigen::Matrix4d& c) {
  ContrastCovariance out;
  out.var_alpha2 = c(1, 1) + c(0, 0) - 2.0 * c(0, 1);
  out.var_beta2 = c(3, 3) + c(2, 2) - 2.0 * c(2, 3);
  out.cov_alpha2_beta2 = c(1, 3) - c(1, 2) - c(0, 3) + c(0, 2);
  return out;
}

}  // namespace

ContrastReport cluster_robust_cov(const SystemFit& fit) {
  ContrastReport report;
  const auto rows = rows_by_teacher(fit);
  const Meat meat = meats(fit);
  std::vector<std::optional<ContrastCovariance>> slots(fit.teachers.size());
  parallel_for(fit.teachers.size(), [&](std::size_t t) {
    if (!fit.has_both_cells(t)) return;
    auto c = contrast_from(cell_covariance(fit, t, rows[t], meat));
    c.teacher_id = fit.teachers[t];
    std::set<int> clusters;
    for (auto i : rows[t]) clusters.insert(fit.cluster.codes[i]);
    c.clusters = clusters.size();
    slots[t] = c;
  });
  for (auto& s : slots) {
    if (!s) continue;
    if (s->clusters < 4)
      report.warnings.push_back(fmt::format("teacher '{}': {} clusters for 4 cell parameters", s->teacher_id, s->clusters));
    report.contrasts.push_back(std::move(*s));
  }
  const auto params = static_cast<std::size_t>(fit.blind.common.size()) + 2 * fit.teachers.size();
  if (static_cast<std::size_t>(fit.cluster.levels) < params)
    report.warnings.push_back(
        fmt::format("{} student clusters for {} parameters in the system", fit.cluster.levels, params));
  return report;
}

GapResult teacher_gaps(const SystemFit& fit, std::size_t min_cell, GapCovarianceMode mode) {
  GapResult out;
  const auto contrasts = cluster_robust_cov(fit);
  out.warnings = contrasts.warnings;
  std::map<std::string, const ContrastCovariance*> by_id;
  for (const auto& c : contrasts.contrasts) by_id[c.teacher_id] = &c;
  for (std::size_t t = 0; t < fit.teachers.size(); ++t) {
    if (static_cast<std::size_t>(fit.n_female[t]) < min_cell || static_cast<std::size_t>(fit.n_male[t]) < min_cell) {
      ++out.omitted_min_cell;
      continue;
    }
    const auto& c = *by_id.at(fit.teachers[t]);
    TeacherGapEstimate g;
    g.teacher_id = fit.teachers[t];
    g.subject = fit.subject;
    g.theta_hat = fit.beta2(t) - fit.alpha2(t);
    double var = c.var_alpha2 + c.var_beta2;
    if (mode == GapCovarianceMode::joint) var -= 2.0 * c.cov_alpha2_beta2;
    g.se = std::sqrt(std::max(var, 0.0));
    g.n_female = fit.n_female[t];
    g.n_male = fit.n_male[t];
    g.years_used = fit.years[t];
    out.gaps.push_back(std::move(g));
  }
  return out;
}

SureFit sure_fit(std::span<const ScoreObservation> obs, const StudentIndex& students, Subject subject,
                 const GapCovariates& covariates) {
  Prepared p = prepare(obs, students, subject, covariates);
  SureFit out;
  regress::Fit fb, ft;
  p.fit.blind = ols_equation(p, p.w_blind, p.y_blind, &fb);
  p.fit.teacher = ols_equation(p, p.w_teacher, p.y_teacher, &ft);
  out.identical_designs = p.w_blind.names == p.w_teacher.names;

  auto residual_cov = [](const Vector& a, const Vector& b) {
    const double n = static_cast<double>(a.size());
    Eigen::Matrix2d s;
    s(0, 0) = a.squaredNorm() / n;
    s(1, 1) = b.squaredNorm() / n;
    s(0, 1) = s(1, 0) = a.dot(b) / n;
    return s;
  };
  Eigen::Matrix2d sigma = residual_cov(p.fit.blind.residuals, p.fit.teacher.residuals);

  if (!out.identical_designs) {
    // FGLS on the cell-demeaned system; demeaning commutes with the
    // cross-equation weighting because both equations absorb the same cells
    const Eigen::Matrix2d s_inv = sigma.inverse();
    const Matrix& xa = fb.x_within;
    const Matrix& xt = ft.x_within;
    const Vector ya = fb.residuals + xa * fb.coef;
    const Vector yt = ft.residuals + xt * ft.coef;
    const Index pa = xa.cols(), pt = xt.cols();
    Matrix a(pa + pt, pa + pt);
    a.topLeftCorner(pa, pa) = s_inv(0, 0) * xa.transpose() * xa;
    a.topRightCorner(pa, pt) = s_inv(0, 1) * xa.transpose() * xt;
    a.bottomLeftCorner(pt, pa) = s_inv(1, 0) * xt.transpose() * xa;
    a.bottomRightCorner(pt, pt) = s_inv(1, 1) * xt.transpose() * xt;
    Vector rhs(pa + pt);
    rhs.head(pa) = xa.transpose() * (s_inv(0, 0) * ya + s_inv(0, 1) * yt);
    rhs.tail(pt) = xt.transpose() * (s_inv(1, 0) * ya + s_inv(1, 1) * yt);
    Eigen::LDLT<Matrix> ldlt(a);
    const Vector b = ldlt.solve(rhs);
    const Matrix a_inv = ldlt.solve(Matrix::Identity(pa + pt, pa + pt));
    p.fit.blind.common = b.head(pa);
    p.fit.teacher.common = b.tail(pt);
    p.fit.blind.residuals = ya - xa * p.fit.blind.common;
    p.fit.teacher.residuals = yt - xt * p.fit.teacher.common;
    const Vector& ea = p.fit.blind.residuals;
    const Vector& et = p.fit.teacher.residuals;
    Matrix scores(ya.size(), pa + pt);
    for (Index i = 0; i < ya.size(); ++i) {
      scores.row(i).head(pa) = xa.row(i) * (s_inv(0, 0) * ea(i) + s_inv(0, 1) * et(i));
      scores.row(i).tail(pt) = xt.row(i) * (s_inv(1, 0) * ea(i) + s_inv(1, 1) * et(i));
    }
    const Matrix infl = scores * a_inv;
    finish_equation(p.fit.blind, p, p.w_blind, p.y_blind, infl.leftCols(pa), fb.absorbed_dof({&p.fit.cluster}));
    finish_equation(p.fit.teacher, p, p.w_teacher, p.y_teacher, infl.rightCols(pt),
                    ft.absorbed_dof({&p.fit.cluster}));
    sigma = residual_cov(ea, et);
    p.fit.notices.push_back("designs differ across equations: common coefficients by feasible GLS");
  }
  out.system = std::move(p.fit);
  out.residual_cov = sigma;
  const double denom = std::sqrt(sigma(0, 0) * sigma(1, 1));
  out.residual_corr = denom > 0 ? sigma(0, 1) / denom : 0.0;
  return out;
}

std::vector<TeacherVa> teacher_va(const SureFit& sure, std::size_t min_cell) {
  const SystemFit& fit = sure.system;
  const auto rows = rows_by_teacher(fit);
  const Meat meat = meats(fit);
  // (theta, VA_f, VA_m) from (alpha_f, alpha_m, beta_f, beta_m)
  Eigen::Matrix<double, 3, 4> map;
  map << 1, -1, -1, 1,  //
      1, 0, 0, 0,       //
      0, 1, 0, 0;
  std::vector<std::optional<TeacherVa>> slots(fit.teachers.size());
  parallel_for(fit.teachers.size(), [&](std::size_t t) {
    if (static_cast<std::size_t>(fit.n_female[t]) < min_cell || static_cast<std::size_t>(fit.n_male[t]) < min_cell)
      return;
    const auto c = cell_covariance(fit, t, rows[t], meat);
    TeacherVa v;
    v.teacher_id = fit.teachers[t];
    v.value << fit.beta2(t) - fit.alpha2(t), fit.alpha1(t), fit.alpha1(t) + fit.alpha2(t);
    v.sampling_cov = map * c * map.transpose();
    slots[t] = std::move(v);
  });
  std::vector<TeacherVa> out;
  for (auto& s : slots)
    if (s) out.push_back(std::move(*s));
  return out;
}

VaCorrelationReport va_correlation_report(std::span<const TeacherVa> teachers, Subject subject,
                                          std::span<const double> weights) {
  if (teachers.size() < 2) throw ValidationError("correlation report needs at least two teachers");
  if (!weights.empty() && weights.size() != teachers.size())
    throw ValidationError("weights must match the number of teachers");
  VaCorrelationReport r;
  r.subject = subject;
  r.teachers = teachers.size();
  std::vector<double> w(teachers.size(), 1.0);
  if (!weights.empty()) w.assign(weights.begin(), weights.end());
  double wsum = 0.0;
  for (double x : w) wsum += x;
  if (!(wsum > 0)) throw ValidationError("weights must sum to a positive value");

  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (std::size_t j = 0; j < teachers.size(); ++j) mean += w[j] / wsum * teachers[j].value;
  for (std::size_t j = 0; j < teachers.size(); ++j) {
    const Eigen::Vector3d d = teachers[j].value - mean;
    r.raw_cov += w[j] / wsum * d * d.transpose();
    r.mean_sampling_cov += w[j] / wsum * teachers[j].sampling_cov;
  }
  Eigen::Matrix3d corrected = r.raw_cov - r.mean_sampling_cov;
  corrected = 0.5 * (corrected + corrected.transpose());
  for (int a = 0; a < 3; ++a) {
    if (corrected(a, a) <= 0.0) {
      r.flags.push_back(fmt::format("bias-corrected variance of {} is not positive; floored at 0",
                                    r.labels[static_cast<std::size_t>(a)]));
      corrected(a, a) = 0.0;
    }
    r.sd(a) = std::sqrt(corrected(a, a));
  }
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      if (a == b) {
        r.correlation(a, b) = 1.0;
        continue;
      }
      const double denom = r.sd(a) * r.sd(b);
      double c = denom > 0 ? corrected(a, b) / denom : 0.0;
      if (c > 1.0 || c < -1.0) {
        if (a < b)
          r.flags.push_back(fmt::format("correlation of {} and {} clamped from {:.4f}", r.labels[static_cast<std::size_t>(a)],
                                        r.labels[static_cast<std::size_t>(b)], c));
        c = std::clamp(c, -1.0, 1.0);
      }
      r.correlation(a, b) = c;
    }
  }
  return r;
}

void write_gaps(const std::filesystem::path& path, std::span<const TeacherGapEstimate> gaps, char delimiter) {
  Table t;
  t.header = {"teacher_id", "subject", "theta_hat", "se", "n_female", "n_male", "years"};
  for (const auto& g : gaps) {
    std::vector<std::string> years;
    for (int y : g.years_used) years.push_back(std::to_string(y));
    t.rows.push_back({g.teacher_id, std::string(to_string(g.subject)), format_double(g.theta_hat), format_double(g.se),
                      std::to_string(g.n_female), std::to_string(g.n_male), fmt::format("{}", fmt::join(years, ";"))});
  }
  write_table(path, t, delimiter);
}

std::vector<TeacherGapEstimate> load_gaps(const std::filesystem::path& path, char delimiter) {
  const Table t = read_table(path, delimiter);
  const auto c_id = t.require_column("teacher_id");
  const auto c_subject = t.require_column("subject");
  const auto c_theta = t.require_column("theta_hat");
  const auto c_se = t.require_column("se");
  const auto c_nf = t.require_column("n_female");
  const auto c_nm = t.require_column("n_male");
  const auto c_years = t.column("years");
  std::vector<TeacherGapEstimate> out;
  for (std::size_t line = 0; line < t.rows.size(); ++line) {
    const auto& r = t.rows[line];
    auto bad = [&](const char* what) {
      return ValidationError(fmt::format("{}: line {}: bad {}", path.string(), line + 1, what));
    };
    if (r.size() < t.header.size()) throw bad("row length");
    TeacherGapEstimate g;
    g.teacher_id = r[c_id];
    auto s = parse_subject(r[c_subject]);
    if (!s) throw bad("subject");
    g.subject = *s;
    auto theta = parse_double(r[c_theta]);
    auto se = parse_double(r[c_se]);
    auto nf = parse_int(r[c_nf]);
    auto nm = parse_int(r[c_nm]);
    if (!theta || !se || !nf || !nm) throw bad("numeric field");
    g.theta_hat = *theta;
    g.se = *se;
    g.n_female = static_cast<int>(*nf);
    g.n_male = static_cast<int>(*nm);
    if (c_years && !r[*c_years].empty()) {
      std::string_view ys = r[*c_years];
      while (!ys.empty()) {
        const auto pos = ys.find(';');
        auto y = parse_int(ys.substr(0, pos));
        if (!y) throw bad("years");
        g.years_used.insert(static_cast<int>(*y));
        if (pos == std::string_view::npos) break;
        ys.remove_prefix(pos + 1);
      }
    }
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace gradegap
