#include "doctest.h"

#include <filesystem>
#include <random>

#include "gradegap/error.hpp"
#include "gradegap/gaps.hpp"

using namespace gradegap;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct Toy {
  std::vector<StudentRecord> students;
  std::vector<ScoreObservation> obs;
};

// 3 teachers; every student is seen by two of them so clusters span teachers.
Toy toy(unsigned seed, bool partial_language = true) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> z;
  Toy t;
  for (int s = 0; s < 36; ++s) {
    StudentRecord r;
    r.student_id = "s" + std::to_string(s);
    r.female = s % 2 == 0;
    r.school_year = 2015;
    t.students.push_back(r);
    for (int k = 0; k < 2; ++k) {
      ScoreObservation o;
      o.student_id = r.student_id;
      o.teacher_id = "t" + std::to_string((s / 2 + k) % 3);
      o.school_year = 2015;
      o.lagged_math = z(rng);
      o.lagged_language = (partial_language && s % 5 == 0) ? kMissing : z(rng);
      o.blind_score = 0.3 * o.lagged_math + z(rng);
      o.teacher_score = 0.5 * o.blind_score + 0.2 * z(rng) + (r.female ? 0.1 : 0.0);
      t.obs.push_back(o);
    }
  }
  return t;
}

// Explicit-dummy regression and its joint cluster-robust sandwich, written
// from scratch: X = [cell dummies, W], clusters are students.
struct Oracle {
  std::vector<VectorXd> coef;
  MatrixXd joint_cov;  // (blind coefs, teacher coefs)
  std::vector<int> cell_column;
};

Oracle oracle(const SystemFit& fit, const std::vector<MatrixXd>& w, const std::vector<VectorXd>& y) {
  const auto n = static_cast<Eigen::Index>(fit.row_cell.size());
  std::map<int, int> cells;
  for (int c : fit.row_cell) cells.emplace(c, 0);
  int next = 0;
  for (auto& [c, j] : cells) j = next++;
  Oracle o;
  o.cell_column.assign(fit.teachers.size() * 2, -1);
  for (auto& [c, j] : cells) o.cell_column[static_cast<std::size_t>(c)] = j;

  std::vector<MatrixXd> x, bread, score;
  std::vector<double> factor;
  std::map<std::string, int> cluster;
  for (const auto& s : fit.row_student) cluster.emplace(s, 0);
  next = 0;
  for (auto& [s, g] : cluster) g = next++;
  const double g_count = static_cast<double>(cluster.size());
  for (int e = 0; e < 2; ++e) {
    MatrixXd xe = MatrixXd::Zero(n, static_cast<Eigen::Index>(cells.size()) + w[static_cast<std::size_t>(e)].cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      xe(i, cells.at(fit.row_cell[static_cast<std::size_t>(i)])) = 1.0;
      xe.row(i).tail(w[static_cast<std::size_t>(e)].cols()) = w[static_cast<std::size_t>(e)].row(i);
    }
    const MatrixXd b = (xe.transpose() * xe).inverse();
    const VectorXd beta = b * xe.transpose() * y[static_cast<std::size_t>(e)];
    const VectorXd r = y[static_cast<std::size_t>(e)] - xe * beta;
    MatrixXd sc = MatrixXd::Zero(next, xe.cols());
    for (Eigen::Index i = 0; i < n; ++i) sc.row(cluster.at(fit.row_student[static_cast<std::size_t>(i)])) += xe.row(i) * r(i);
    const double k = static_cast<double>(xe.cols());
    const double nn = static_cast<double>(n);
    factor.push_back(g_count / (g_count - 1) * (nn - 1) / (nn - k));
    o.coef.push_back(beta);
    x.push_back(xe);
    bread.push_back(b);
    score.push_back(sc);
  }
  const Eigen::Index pa = x[0].cols(), pb = x[1].cols();
  MatrixXd s(next, pa + pb);
  s << score[0] * bread[0], score[1] * bread[1];
  MatrixXd v = s.transpose() * s;
  v.topLeftCorner(pa, pa) *= factor[0];
  v.bottomRightCorner(pb, pb) *= factor[1];
  v.topRightCorner(pa, pb) *= std::sqrt(factor[0] * factor[1]);
  v.bottomLeftCorner(pb, pa) *= std::sqrt(factor[0] * factor[1]);
  o.joint_cov = v;
  return o;
}

MatrixXd lag_design(const Toy& t, bool with_language) {
  const auto n = static_cast<Eigen::Index>(t.obs.size());
  MatrixXd w(n, with_language ? 5 : 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& o = t.obs[static_cast<std::size_t>(i)];
    w(i, 0) = o.lagged_math;
    w(i, 1) = o.lagged_math * o.lagged_math;
    if (with_language) {
      const bool m = std::isnan(o.lagged_language);
      w(i, 2) = m ? 0.0 : o.lagged_language;
      w(i, 3) = w(i, 2) * w(i, 2);
      w(i, 4) = m ? 1.0 : 0.0;
    }
  }
  return w;
}

VectorXd outcome(const Toy& t, bool blind) {
  VectorXd y(static_cast<Eigen::Index>(t.obs.size()));
  for (std::size_t i = 0; i < t.obs.size(); ++i) y(static_cast<Eigen::Index>(i)) = blind ? t.obs[i].blind_score : t.obs[i].teacher_score;
  return y;
}

}  // namespace

TEST_CASE("absorbed cells reproduce the explicit-dummy fit and sandwich") {
  const Toy t = toy(7);
  StudentIndex idx(t.students);
  const SystemFit fit = estimate_system(t.obs, idx, Subject::math);
  REQUIRE(fit.teachers.size() == 3);
  REQUIRE(fit.blind.names.size() == 5);  // physed lag never observed

  const MatrixXd w = lag_design(t, true);
  const Oracle o = oracle(fit, {w, w}, {outcome(t, true), outcome(t, false)});
  const auto cells = static_cast<Eigen::Index>(fit.teachers.size() * 2);
  for (Eigen::Index j = 0; j < 5; ++j) {
    CHECK(fit.blind.common(j) == doctest::Approx(o.coef[0](cells + j)).epsilon(1e-9));
    CHECK(fit.teacher.common(j) == doctest::Approx(o.coef[1](cells + j)).epsilon(1e-9));
  }
  for (std::size_t tt = 0; tt < fit.teachers.size(); ++tt) {
    const int cf = o.cell_column[2 * tt], cm = o.cell_column[2 * tt + 1];
    CHECK(fit.alpha1(tt) == doctest::Approx(o.coef[0](cf)).epsilon(1e-9));
    CHECK(fit.beta2(tt) == doctest::Approx(o.coef[1](cm) - o.coef[1](cf)).epsilon(1e-9));

    const Eigen::Matrix4d mine = teacher_cell_covariance(fit, tt);
    const Eigen::Index pa = o.coef[0].size();
    const Eigen::Index ix[4] = {cf, cm, pa + cf, pa + cm};
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) CHECK(mine(a, b) == doctest::Approx(o.joint_cov(ix[a], ix[b])).epsilon(1e-8));
  }
}

TEST_CASE("gap standard errors follow the contrast of the cell covariance") {
  const Toy t = toy(11);
  StudentIndex idx(t.students);
  const SystemFit fit = estimate_system(t.obs, idx, Subject::math);
  const auto gaps = teacher_gaps(fit, 2);
  REQUIRE(gaps.gaps.size() == 3);
  for (std::size_t j = 0; j < 3; ++j) {
    const auto c = teacher_cell_covariance(fit, j);
    const double var_a2 = c(0, 0) + c(1, 1) - 2 * c(0, 1);
    const double var_b2 = c(2, 2) + c(3, 3) - 2 * c(2, 3);
    CHECK(gaps.gaps[j].se == doctest::Approx(std::sqrt(var_a2 + var_b2)).epsilon(1e-12));
    CHECK(gaps.gaps[j].theta_hat == doctest::Approx(fit.beta2(j) - fit.alpha2(j)));
    CHECK(gaps.gaps[j].se > 0);
  }
  const auto joint = teacher_gaps(fit, 2, GapCovarianceMode::joint);
  for (std::size_t j = 0; j < 3; ++j) {
    const auto c = teacher_cell_covariance(fit, j);
    const double cov = c(1, 3) - c(1, 2) - c(0, 3) + c(0, 2);
    CHECK(joint.gaps[j].se * joint.gaps[j].se ==
          doctest::Approx(gaps.gaps[j].se * gaps.gaps[j].se - 2 * cov).epsilon(1e-10));
  }
}

TEST_CASE("gap is invariant to constant shifts of either score") {
  Toy t = toy(3);
  StudentIndex idx(t.students);
  const auto base = teacher_gaps(estimate_system(t.obs, idx, Subject::math));
  for (auto& o : t.obs) {
    o.teacher_score += 5.0;
    o.blind_score -= 2.0;
  }
  const auto shifted = teacher_gaps(estimate_system(t.obs, idx, Subject::math));
  for (std::size_t j = 0; j < base.gaps.size(); ++j) {
    CHECK(shifted.gaps[j].theta_hat == doctest::Approx(base.gaps[j].theta_hat).epsilon(1e-9));
    CHECK(shifted.gaps[j].se == doctest::Approx(base.gaps[j].se).epsilon(1e-9));
  }
}

TEST_CASE("planted gap with no noise is recovered exactly") {
  Toy t = toy(5);
  for (auto& o : t.obs) {
    const bool female = std::stoi(o.student_id.substr(1)) % 2 == 0;
    const double gap = o.teacher_id == "t0" ? 0.4 : (o.teacher_id == "t1" ? -0.2 : 0.0);
    o.blind_score = 0.3 * o.lagged_math;
    o.teacher_score = o.blind_score + 0.7 + (female ? 0.0 : gap);
  }
  StudentIndex idx(t.students);
  const auto g = teacher_gaps(estimate_system(t.obs, idx, Subject::math));
  CHECK(g.gaps[0].theta_hat == doctest::Approx(0.4).epsilon(1e-10));
  CHECK(g.gaps[1].theta_hat == doctest::Approx(-0.2).epsilon(1e-10));
  CHECK(std::abs(g.gaps[2].theta_hat) < 1e-10);
}

TEST_CASE("single-gender and small cells") {
  Toy t = toy(9);
  // t9 sees only girls
  for (int s = 0; s < 3; ++s) {
    ScoreObservation o = t.obs[static_cast<std::size_t>(4 * s)];
    o.teacher_id = "t9";
    t.obs.push_back(o);
  }
  StudentIndex idx(t.students);
  const auto fit = estimate_system(t.obs, idx, Subject::math);
  REQUIRE(fit.single_gender == std::vector<std::string>{"t9"});
  CHECK_THROWS_AS(teacher_cell_covariance(fit, 3), ValidationError);
  const auto g = teacher_gaps(fit, 2);
  CHECK(g.gaps.size() == 3);
  CHECK(g.omitted_min_cell == 1);
  const auto strict = teacher_gaps(fit, 100);
  CHECK(strict.gaps.empty());
  CHECK(strict.omitted_min_cell == 4);
}

TEST_CASE("collinear covariates are an error naming the column") {
  Toy t = toy(4, false);
  for (auto& o : t.obs) o.lagged_language = 2.0 * o.lagged_math;
  StudentIndex idx(t.students);
  try {
    estimate_system(t.obs, idx, Subject::math);
    FAIL("expected a degenerate-design error");
  } catch (const DegenerateError& e) {
    CHECK(std::string(e.what()).find("lag_language") != std::string::npos);
  }
}

TEST_CASE("identical designs make the joint fit equal equation by equation") {
  const Toy t = toy(21);
  StudentIndex idx(t.students);
  const auto ols = estimate_system(t.obs, idx, Subject::math);
  const auto sure = sure_fit(t.obs, idx, Subject::math);
  CHECK(sure.identical_designs);
  for (std::size_t j = 0; j < ols.teachers.size(); ++j) {
    CHECK(sure.system.alpha2(j) == doctest::Approx(ols.alpha2(j)).epsilon(1e-12));
    CHECK(sure.system.beta2(j) == doctest::Approx(ols.beta2(j)).epsilon(1e-12));
  }
  CHECK(sure.residual_corr > 0.0);
  CHECK(sure.residual_corr < 1.0);
}

TEST_CASE("differing designs use feasible GLS and keep the orthogonality conditions") {
  const Toy t = toy(22);
  StudentIndex idx(t.students);
  GapCovariates cov;
  cov.blind_exclude = {"lag_language", "lag_language_sq", "lag_language_missing"};
  const auto sure = sure_fit(t.obs, idx, Subject::math, cov);
  CHECK_FALSE(sure.identical_designs);
  CHECK(sure.system.blind.common.size() == 2);
  CHECK(sure.system.teacher.common.size() == 5);
  // cell effects make residuals mean zero within every cell
  std::map<int, double> sum;
  for (std::size_t i = 0; i < sure.system.row_cell.size(); ++i) {
    sum[sure.system.row_cell[i]] += sure.system.blind.residuals(static_cast<Eigen::Index>(i));
    sum[sure.system.row_cell[i] + 1000] += sure.system.teacher.residuals(static_cast<Eigen::Index>(i));
  }
  for (const auto& [c, s] : sum) CHECK(std::abs(s) < 1e-10);
  const auto ols = estimate_system(t.obs, idx, Subject::math, cov);
  CHECK(sure.system.teacher.common(0) != ols.teacher.common(0));
  CHECK(sure.system.teacher.common(0) == doctest::Approx(ols.teacher.common(0)).epsilon(0.2));
  CHECK_THROWS_AS(sure_fit(t.obs, idx, Subject::math, GapCovariates{true, false, false, {"nope"}}), ValidationError);
}

TEST_CASE("VA correlation report subtracts sampling covariance") {
  std::vector<TeacherVa> v(4);
  const double vals[4][3] = {{0.1, 1.0, 1.1}, {-0.1, -1.0, -1.1}, {0.2, 0.5, 0.7}, {-0.2, -0.5, -0.7}};
  for (int j = 0; j < 4; ++j) {
    v[static_cast<std::size_t>(j)].value << vals[j][0], vals[j][1], vals[j][2];
    v[static_cast<std::size_t>(j)].sampling_cov = Eigen::Matrix3d::Identity() * 0.001;
  }
  const auto r = va_correlation_report(v, Subject::math);
  // raw variances: theta .025, VA_f .625, VA_m .85
  CHECK(r.raw_cov(0, 0) == doctest::Approx(0.025));
  CHECK(r.sd(0) == doctest::Approx(std::sqrt(0.024)));
  CHECK(r.sd(1) == doctest::Approx(std::sqrt(0.624)));
  const double cov01 = (0.1 + 0.1 + 0.1 + 0.1) / 4;
  CHECK(r.correlation(0, 1) == doctest::Approx(cov01 / std::sqrt(0.024 * 0.624)));
  CHECK(r.flags.empty());

  for (auto& t : v) t.sampling_cov(0, 0) = 1.0;
  const auto floored = va_correlation_report(v, Subject::math);
  CHECK(floored.sd(0) == 0.0);
  CHECK_FALSE(floored.flags.empty());
  CHECK(floored.correlation(0, 1) == 0.0);
}

TEST_CASE("gap table round trip") {
  std::vector<TeacherGapEstimate> g(2);
  g[0] = {"a", Subject::math, 0.125, 0.5, 10, 12, {2015, 2016}};
  g[1] = {"b", Subject::language_arts, -1.0 / 3.0, 0.25, 3, 4, {}};
  const auto path = std::filesystem::temp_directory_path() / "gradegap_gaps_rt.csv";
  write_gaps(path, g);
  const auto back = load_gaps(path);
  REQUIRE(back.size() == 2);
  CHECK(back[1].theta_hat == g[1].theta_hat);
  CHECK(back[0].years_used == g[0].years_used);
  CHECK(back[1].subject == Subject::language_arts);
  std::filesystem::remove(path);
}
