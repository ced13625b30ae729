#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

#include <random>

#include "gradegap/effects.hpp"
#include "gradegap/error.hpp"
#include "gradegap/parallel.hpp"
#include "gradegap/synthetic.hpp"

using namespace gradegap;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

EffectsSample tiny(std::mt19937& rng, int n, int schools, int cohorts) {
  std::normal_distribution<double> z;
  std::uniform_int_distribution<int> sch(0, schools - 1), coh(0, cohorts - 1);
  std::bernoulli_distribution coin(0.5);
  EffectsSample s;
  s.covariate_names = {"x"};
  for (int i = 0; i < n; ++i) {
    ExposureRow r;
    r.student_id = "s" + std::to_string(i / 2);
    r.school_id = "sch" + std::to_string(i < schools ? i : sch(rng));
    r.cohort = 2015 + (i < cohorts ? i : coh(rng));
    r.grade = 8 + i % 3;
    r.school_year = r.cohort - 3;
    r.female = coin(rng);
    r.treatment = z(rng);
    r.covariates = {z(rng)};
    s.rows.push_back(r);
  }
  return s;
}

std::vector<double> outcome_for(std::mt19937& rng, const EffectsSample& s) {
  std::normal_distribution<double> z;
  std::vector<double> y;
  for (const auto& r : s.rows)
    y.push_back(0.3 * r.treatment * r.female - 0.2 * r.female + 0.1 * r.treatment + 0.5 * r.covariates[0] +
                0.1 * (r.cohort % 7) + z(rng));
  return y;
}

}  // namespace

TEST_CASE("absorbed solution and clustered covariance match an explicit dummy oracle") {
  std::mt19937 rng(21);
  for (int rep = 0; rep < 10; ++rep) {
    const int n = 30 + rep * 3, schools = 4, cohorts = 3;
    const EffectsSample s = tiny(rng, n, schools, cohorts);
    const auto y = outcome_for(rng, s);
    EffectsSpec spec;
    spec.fixed_effects = {FixedEffect::cohort, FixedEffect::school};
    const EffectsResult r = estimate_effects(s, y, "y", spec);

    // oracle: slopes, every school dummy, cohort dummies after the first
    const int p = 4 + schools + cohorts - 1;
    MatrixXd X = MatrixXd::Zero(n, p);
    VectorXd Y(n);
    for (int i = 0; i < n; ++i) {
      const auto& row = s.rows[static_cast<std::size_t>(i)];
      const double f = row.female ? 1.0 : 0.0;
      X(i, 0) = row.treatment * f;
      X(i, 1) = f;
      X(i, 2) = row.treatment;
      X(i, 3) = row.covariates[0];
      X(i, 4 + std::stoi(row.school_id.substr(3))) = 1.0;
      if (row.cohort > 2015) X(i, 4 + schools + row.cohort - 2016) = 1.0;
      Y(i) = y[static_cast<std::size_t>(i)];
    }
    const MatrixXd XtX = X.transpose() * X;
    const MatrixXd inv = XtX.inverse();
    const VectorXd b = inv * X.transpose() * Y;
    const VectorXd e = Y - X * b;
    MatrixXd meat = MatrixXd::Zero(p, p);
    for (int g = 0; g < schools; ++g) {
      VectorXd sg = VectorXd::Zero(p);
      for (int i = 0; i < n; ++i)
        if (X(i, 4 + g) == 1.0) sg += X.row(i).transpose() * e(i);
      meat += sg * sg.transpose();
    }
    // school effects sit inside the school clusters and are not counted
    const double K = 4 + cohorts;
    const double c = schools / (schools - 1.0) * (n - 1.0) / (n - K);
    const MatrixXd V = c * inv * meat * inv;
    const std::vector<std::string> names = {"theta_x_female", "female", "theta", "x"};
    for (int k = 0; k < 4; ++k) {
      const auto* coef = r.find(names[static_cast<std::size_t>(k)]);
      REQUIRE(coef);
      CHECK(std::abs(coef->estimate - b(k)) <= 1e-8);
      CHECK(std::abs(coef->se - std::sqrt(V(k, k))) <= 1e-10);
    }
  }
}

TEST_CASE("constant outcome gives zero slopes") {
  std::mt19937 rng(2);
  const EffectsSample s = tiny(rng, 60, 5, 3);
  const std::vector<double> y(s.rows.size(), 0.7);
  const auto r = estimate_effects(s, y, "const");
  for (const auto& c : r.coefficients) CHECK(std::abs(c.estimate) <= 1e-10);
  CHECK(r.mean_female == doctest::Approx(0.7));
}

TEST_CASE("two-way clustering collapses to one-way on identical partitions") {
  std::mt19937 rng(4);
  EffectsSample s = tiny(rng, 80, 10, 3);
  for (auto& r : s.rows) r.student_id = r.school_id;
  const auto y = outcome_for(rng, s);
  EffectsSpec one, two;
  one.cluster = ClusterSpec::school;
  two.cluster = ClusterSpec::student_school;
  one.fixed_effects = two.fixed_effects = {FixedEffect::cohort};
  const auto a = estimate_effects(s, y, "y", one), b = estimate_effects(s, y, "y", two);
  CHECK((a.cov - b.cov).cwiseAbs().maxCoeff() <= 1e-12 * a.cov.cwiseAbs().maxCoeff());
}

TEST_CASE("a column spanned by the fixed effects changes no slope") {
  std::mt19937 rng(6);
  EffectsSample s = tiny(rng, 70, 6, 4);
  const auto y = outcome_for(rng, s);
  const auto base = estimate_effects(s, y, "y");
  s.covariate_names.push_back("cohort_number");
  for (auto& r : s.rows) r.covariates.push_back(static_cast<double>(r.cohort));
  const auto more = estimate_effects(s, y, "y");
  CHECK(std::find(more.dropped.begin(), more.dropped.end(), "cohort_number") != more.dropped.end());
  for (const auto& c : base.coefficients) CHECK(std::abs(more.find(c.name)->estimate - c.estimate) <= 1e-10);
}

TEST_CASE("row order and thread count do not move the estimates") {
  std::mt19937 rng(8);
  EffectsSample s = tiny(rng, 200, 12, 4);
  auto y = outcome_for(rng, s);
  EffectsSpec spec;
  spec.cluster = ClusterSpec::student_school;
  set_thread_count(1);
  const auto a = estimate_effects(s, y, "y", spec);
  set_thread_count(4);
  const auto b = estimate_effects(s, y, "y", spec);
  set_thread_count(1);
  for (std::size_t k = 0; k < a.coefficients.size(); ++k) {
    CHECK(a.coefficients[k].estimate == b.coefficients[k].estimate);
    CHECK(a.coefficients[k].se == b.coefficients[k].se);
  }
  std::vector<std::size_t> perm(s.rows.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  EffectsSample t = s;
  std::vector<double> yt(y.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    t.rows[i] = s.rows[perm[i]];
    yt[i] = y[perm[i]];
  }
  const auto c = estimate_effects(t, yt, "y", spec);
  for (std::size_t k = 0; k < a.coefficients.size(); ++k) {
    CHECK(std::abs(a.coefficients[k].estimate - c.coefficients[k].estimate) <= 1e-10);
    CHECK(std::abs(a.coefficients[k].se - c.coefficients[k].se) <= 1e-10);
  }
}

TEST_CASE("single-level fixed effect is dropped with a notice") {
  std::mt19937 rng(10);
  EffectsSample s = tiny(rng, 50, 5, 1);
  const auto y = outcome_for(rng, s);
  EffectsSpec spec;
  spec.fixed_effects = {FixedEffect::cohort, FixedEffect::school};
  const auto r = estimate_effects(s, y, "y", spec);
  CHECK_FALSE(r.notices.empty());
  CHECK(r.find("theta_x_female"));
}

TEST_CASE("planted interaction is recovered") {
  EffectsDgp c;
  c.seed = 77;
  c.students = 20000;
  c.d1 = -0.04;
  const EffectsSample s = generate_effects_sample(c);
  EffectsSpec spec;
  spec.cluster = ClusterSpec::student_school;
  const auto r = estimate_effects(s, s.outcome, "y", spec);
  const auto* d1 = r.find("theta_x_female");
  REQUIRE(d1);
  CHECK(std::abs(d1->estimate - c.d1) <= 2.0 * d1->se);
  CHECK(r.clusters.size() == 2);
  CHECK(r.n == 60000);
}

TEST_CASE("percentile outcomes") {
  std::mt19937 rng(12);
  EffectsSample s = tiny(rng, 120, 8, 3);
  std::lognormal_distribution<double> pay(6.0, 0.5);
  std::bernoulli_distribution employed(0.6);
  std::vector<double> earnings, reference;
  for (std::size_t i = 0; i < s.rows.size(); ++i) earnings.push_back(employed(rng) ? pay(rng) : 0.0);
  for (int i = 0; i < 500; ++i) reference.push_back(pay(rng));
  const std::vector<double> grid = {0, 25, 50, 75, 100};
  const auto res = percentile_effects(s, earnings, reference, grid);
  REQUIRE(res.size() == grid.size());

  std::vector<double> employed_y;
  for (double e : earnings) employed_y.push_back(e > 0 ? 1.0 : 0.0);
  const auto emp = estimate_effects(s, employed_y, "employed");
  CHECK(res[0].threshold == 0.0);
  CHECK(res[0].result.find("theta")->estimate == doctest::Approx(emp.find("theta")->estimate).epsilon(1e-12));
  for (const auto& c : res[4].result.coefficients) CHECK(std::abs(c.estimate) <= 1e-10);

  std::vector<double> sorted = reference;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t k = 1; k < grid.size(); ++k) {
    const double lo = reference_quantile(sorted, grid[k - 1]), hi = reference_quantile(sorted, grid[k]);
    CHECK(lo <= hi);
    for (double e : earnings) CHECK((e > hi ? 1 : 0) <= (e > lo ? 1 : 0));
  }
  CHECK(reference_quantile(sorted, 50) == doctest::Approx(0.5 * (sorted[249] + sorted[250])));
  CHECK_THROWS_AS(percentile_effects(s, earnings, std::vector<double>{}, grid), ValidationError);
}

TEST_CASE("internalization") {
  DgpConfig c;
  c.seed = 33;
  c.teachers = 300;
  c.students_per_teacher = 40;
  c.iat.trials_per_block = 4;
  const auto d = generate(c);
  const auto loo = leave_one_year_out(d.panel.scores, d.panel.students, {});
  const auto base = build_exposure(d.panel.scores, d.panel.students, d.panel.teachers, loo);
  double m = 0, v = 0;
  for (const auto& [id, x] : d.truth.teacher_iat) m += x;
  m /= d.truth.teacher_iat.size();
  for (const auto& [id, x] : d.truth.teacher_iat) v += (x - m) * (x - m);
  const double sd = std::sqrt(v / d.truth.teacher_iat.size());
  std::map<std::string, double> z;
  for (const auto& [id, x] : d.truth.teacher_iat) z[id] = (x - m) / sd;
  const auto s = replace_treatment(base, z);
  const auto y = outcome_column(s, {}, {}, d.panel.student_iat, "student_iat");
  const auto r = internalization(s, y, "iat");
  const auto* n1 = r.find("iat_x_female");
  REQUIRE(n1);
  CHECK(std::abs(n1->estimate - 0.20) <= 2.0 * n1->se);
  CHECK(r.fixed_effects == "school+grade");

  std::map<std::string, double> flat;
  for (const auto& [id, x] : z) flat[id] = 0.5;
  const auto f = replace_treatment(base, flat);
  try {
    internalization(f, y, "iat");
    FAIL("expected an error");
  } catch (const DegenerateError& e) {
    CHECK(std::string(e.what()).find("iat") != std::string::npos);
  }
}

TEST_CASE("leave-one-year-out") {
  DgpConfig c;
  c.seed = 41;
  c.teachers = 60;
  c.students_per_teacher = 40;
  c.blind_noise_sd = c.teacher_noise_sd = 0.3;
  c.iat.enabled = false;
  const auto d = generate(c);
  const auto ex = exam_years_by_cohort(d.panel.scores, d.panel.students, Subject::math);
  REQUIRE(ex.size() == 4);
  CHECK(ex.at(2018) == std::set<int>{2015});
  const auto loo = leave_one_year_out(d.panel.scores, d.panel.students, ex);
  check_loo_provenance(loo);
  for (const auto& t : loo.cohorts) {
    CHECK(t.value.size() == 60);
    for (const auto& g : t.gaps)
      for (int y : g.years_used) CHECK_FALSE(t.excluded.count(y));
  }

  SUBCASE("perturbing the excluded year leaves that cohort untouched") {
    auto scores = d.panel.scores;
    std::mt19937 rng(1);
    std::normal_distribution<double> z;
    for (auto& o : scores)
      if (o.school_year == 2015) {
        o.teacher_score += z(rng);
        o.blind_score += z(rng);
      }
    const auto p = leave_one_year_out(scores, d.panel.students, ex);
    CHECK(p.for_cohort(2018).value == loo.for_cohort(2018).value);
    bool other = false;
    for (int k : {2019, 2021, 2022}) other = other || p.for_cohort(k).value != loo.for_cohort(k).value;
    CHECK(other);
  }

  SUBCASE("tampered provenance is caught") {
    auto bad = loo;
    bad.cohorts[0].gaps[0].years_used.insert(*bad.cohorts[0].excluded.begin());
    CHECK_THROWS_AS(check_loo_provenance(bad), ValidationError);
  }

  SUBCASE("exposure rows carry disjoint provenance") {
    const auto s = build_exposure(d.panel.scores, d.panel.students, d.panel.teachers, loo);
    CHECK(s.rows.size() == d.panel.scores.size());
    for (const auto& r : s.rows)
      for (int y : r.provenance) CHECK(y != r.cohort - 3);
  }
}

TEST_CASE("leave-one-year-out edge cases") {
  DgpConfig c;
  c.seed = 43;
  c.teachers = 30;
  c.students_per_teacher = 30;
  c.years = {2015};
  c.iat.enabled = false;
  const auto d = generate(c);
  const auto ex = exam_years_by_cohort(d.panel.scores, d.panel.students, Subject::math);
  const auto loo = leave_one_year_out(d.panel.scores, d.panel.students, ex);
  REQUIRE(loo.cohorts.size() == 1);
  CHECK(loo.cohorts[0].value.empty());
  CHECK_FALSE(loo.cohorts[0].flags.empty());
  const auto empty = build_exposure(d.panel.scores, d.panel.students, d.panel.teachers, loo);
  CHECK(empty.rows.empty());
  CHECK(empty.excluded_no_treatment == d.panel.scores.size());

  // a second year with identical data
  Panel two = d.panel;
  for (const auto& s : d.panel.students) {
    auto t = s;
    t.school_year = 2016;
    two.students.push_back(t);
  }
  for (const auto& o : d.panel.scores) {
    auto t = o;
    t.school_year = 2016;
    two.scores.push_back(t);
  }
  const auto dup = leave_one_year_out(two.scores, two.students, {{2018, {2015}}});
  CHECK(dup.cohorts[0].value == loo.all_years.value);
}

TEST_CASE("effects table round trip and layout") {
  std::mt19937 rng(14);
  const EffectsSample s = tiny(rng, 90, 6, 3);
  const auto y = outcome_for(rng, s);
  std::vector<EffectsResult> rs = {estimate_effects(s, y, "first"), estimate_effects(s, y, "second")};
  const auto path = std::filesystem::temp_directory_path() / "gradegap_effects_test.csv";
  write_effects(path, rs);
  const auto back = load_effects(path);
  std::filesystem::remove(path);
  REQUIRE(back.size() == 2);
  CHECK(back[1].outcome == "second");
  CHECK(back[0].find("theta_x_female")->estimate == rs[0].find("theta_x_female")->estimate);
  CHECK(back[0].mean_male == rs[0].mean_male);
  const std::string table = format_effects_table(back);
  CHECK(table.find("theta x Female") != std::string::npos);
  CHECK(table.find("Mean outcome, female") != std::string::npos);
  CHECK(table.find(fmt::format("({:.4f})", rs[0].find("female")->se)) != std::string::npos);
}
