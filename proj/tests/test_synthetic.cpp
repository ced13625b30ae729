#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gradegap/error.hpp"
#include "gradegap/heterogeneity.hpp"
#include "gradegap/synthetic.hpp"

using namespace gradegap;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

DgpConfig small(std::uint64_t seed) {
  DgpConfig c;
  c.seed = seed;
  c.teachers = 12;
  c.students_per_teacher = 16;
  c.iat.trials_per_block = 12;
  return c;
}

}  // namespace

TEST_CASE("philox known answers") {
  auto a = Philox4x32::block({0, 0, 0, 0}, {0, 0});
  CHECK(a == Philox4x32::Counter{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u});
  auto b = Philox4x32::block({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
  CHECK(b == Philox4x32::Counter{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u});
}

TEST_CASE("stream draws") {
  RandomStream r(1, 2, 3);
  double m = 0, v = 0, lo = 1, hi = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    lo = std::min(lo, u);
    hi = std::max(hi, u);
    const double z = r.normal();
    m += z;
    v += z * z;
  }
  CHECK(lo > 0.0);
  CHECK(hi < 1.0);
  CHECK(std::abs(m / n) < 0.03);
  CHECK(std::abs(v / n - 1.0) < 0.04);
  RandomStream a(1, 2, 3), b(1, 2, 4);
  CHECK(a() != b());
}

TEST_CASE("config validation") {
  DgpConfig c;
  CHECK_THROWS_AS(generate(c), ValidationError);
  c = small(1);
  c.blind_noise_sd = -1;
  CHECK_THROWS_AS(generate(c), ValidationError);
  c = small(1);
  c.female_share = 1.5;
  CHECK_THROWS_AS(generate(c), ValidationError);
  c = small(1);
  c.prior.shape = PriorShape::mixture;
  CHECK_THROWS_AS(generate(c), ValidationError);
  const DgpConfig back = DgpConfig::from_json(small(9).to_json());
  CHECK(back.to_json() == small(9).to_json());
}

TEST_CASE("same seed gives identical files") {
  const auto dir = std::filesystem::temp_directory_path() / "gradegap_syn_test";
  std::filesystem::remove_all(dir);
  const DgpConfig c = small(42);
  write_synthetic(dir / "a", generate(c), c);
  write_synthetic(dir / "b", generate(c), c);
  for (const char* f : {"students.csv", "scores.csv", "teachers.csv", "events.csv", "employment.csv",
                        "student_iat.csv", "iat_trials.csv", "truth.json", "config.json"}) {
    INFO(f);
    REQUIRE(std::filesystem::exists(dir / "a" / f));
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  }
  const Panel p = load_panel(dir / "a");
  CHECK(p.rejects.empty());
  CHECK(p.scores.size() == 12 * 16);
  std::filesystem::remove_all(dir);
}

TEST_CASE("adding teachers leaves existing draws alone") {
  DgpConfig a = small(5), b = small(5);
  b.teachers = 20;
  const auto da = generate(a), db = generate(b);
  for (std::size_t i = 0; i < da.panel.scores.size(); ++i) {
    CHECK(da.panel.scores[i].blind_score == db.panel.scores[i].blind_score);
    CHECK(da.panel.students[i].female == db.panel.students[i].female);
  }
  CHECK(da.truth.theta == std::map<std::string, double>(db.truth.theta.begin(), std::next(db.truth.theta.begin(), 12)));
}

TEST_CASE("null assessment gap with no noise is recovered exactly") {
  DgpConfig c = small(8);
  c.prior.shape = PriorShape::point_mass;
  c.prior.mean = 0.0;
  c.blind_noise_sd = c.teacher_noise_sd = 0.0;
  const auto d = generate(c);
  const StudentIndex idx(d.panel.students);
  const auto g = teacher_gaps(estimate_system(d.panel.scores, idx, Subject::math));
  REQUIRE(!g.gaps.empty());
  for (const auto& x : g.gaps) CHECK(std::abs(x.theta_hat) <= 1e-10);
}

TEST_CASE("planted gaps come back through the estimator") {
  DgpConfig c;
  c.seed = 17;
  c.teachers = 200;
  c.students_per_teacher = 60;
  c.iat.enabled = false;
  c.blind_noise_sd = c.teacher_noise_sd = 0.3;
  const auto d = generate(c);
  const StudentIndex idx(d.panel.students);
  const auto g = teacher_gaps(estimate_system(d.panel.scores, idx, Subject::math));
  double err = 0.0;
  for (const auto& x : g.gaps) err += x.theta_hat - d.truth.theta.at(x.teacher_id);
  CHECK(std::abs(err / g.gaps.size()) < 0.02);
  const auto v = variance_decomposition(g.gaps);
  CHECK(std::abs(v.mean - d.truth.sample_mean) < 0.03);
}

TEST_CASE("raw point scores need standardizing and pass validation") {
  DgpConfig c = small(3);
  c.raw_points = true;
  const auto d = generate(c);
  for (const auto& o : d.panel.scores) CHECK_FALSE(o.standardized);
  const auto z = standardize_scores(d.panel.scores);
  double m = 0;
  for (const auto& o : z) m += o.blind_score;
  CHECK(std::abs(m / z.size()) < 1e-10);
}

TEST_CASE("mixture prior moments") {
  ThetaPrior p;
  p.shape = PriorShape::mixture;
  p.components = {{0.5, -0.4, 0.05}, {0.5, -0.1, 0.05}};
  CHECK(p.population_mean() == doctest::Approx(-0.25));
  CHECK(p.population_variance() == doctest::Approx(0.0025 + 0.0225));
}

TEST_CASE("generated IAT logs recover their target") {
  IatLatencyModel m;
  auto mean_d = [&](double target, int n, std::uint64_t seed) {
    double s = 0;
    for (int i = 0; i < n; ++i) {
      RandomStream r(seed, 3, static_cast<std::uint64_t>(i));
      s += score_iat(generate_iat("r", target, m, r)).d_score;
    }
    return s / n;
  };
  CHECK(std::abs(mean_d(0.0, 100, 1)) < 0.05);
  CHECK(std::abs(mean_d(0.301, 500, 2) - 0.301) < 0.03);
  for (double t : {-1.5, -0.5, 0.5, 1.5}) CHECK(std::abs(mean_d(t, 50, 3) - t) < 0.1);

  RandomStream r(4, 3, 0);
  auto trials = generate_iat("r", 0.4, m, r);
  CHECK(trials.size() == 120);
  const double d = score_iat(trials).d_score;
  for (auto& t : trials) t.latency_ms *= 2.0;
  CHECK(score_iat(trials).d_score == d);
  CHECK_THROWS_AS(generate_iat("r", 2.0, m, r), ValidationError);
}
