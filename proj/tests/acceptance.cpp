// One line per acceptance criterion. Exit status is the number of failures.
#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <cstring>
#include <thread>
#include <unistd.h>

#include "gradegap/cli.hpp"
#include "gradegap/eb.hpp"
#include "gradegap/effects.hpp"
#include "gradegap/error.hpp"
#include "gradegap/gaps.hpp"
#include "gradegap/heterogeneity.hpp"
#include "gradegap/iat.hpp"
#include "gradegap/parallel.hpp"
#include "gradegap/regression.hpp"
#include "gradegap/synthetic.hpp"

using namespace gradegap;
using Eigen::MatrixXd;
using Eigen::VectorXd;
namespace fs = std::filesystem;

namespace {

// pinned tolerances
constexpr double kTrueMean = -0.2978, kTrueSd = 0.0973;
constexpr double kMeanTol = 0.01, kSdTol = 0.015, kTimeLimit = 60.0;
constexpr double kRatioTarget = 0.2, kRatioTol = 0.10;
constexpr double kModeTol = 0.03, kMomentTol = 0.05, kGradTol = 1e-6;
constexpr double kCoefTol = 1e-8, kSandwichTol = 1e-10;
constexpr double kDelta1 = -0.0151, kSeMultiple = 2.0, kRejectTarget = 0.05, kRejectTol = 0.03;
constexpr double kHandD = 1.3887, kHandTol = 1e-4;

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::vector<TeacherGapEstimate> gaps_from(const std::vector<double>& theta, const std::vector<double>& se) {
  std::vector<TeacherGapEstimate> out;
  for (std::size_t j = 0; j < theta.size(); ++j) {
    TeacherGapEstimate g;
    g.teacher_id = fmt::format("t{:05d}", j);
    g.theta_hat = theta[j];
    g.se = se[j];
    g.n_female = g.n_male = 10;
    out.push_back(g);
  }
  return out;
}

Outcome gap_recovery() {
  const auto t0 = std::chrono::steady_clock::now();
  double mean = 0.0, sd = 0.0;
  const int seeds = 20;
  for (int s = 1; s <= seeds; ++s) {
    DgpConfig c;
    c.seed = static_cast<std::uint64_t>(s);
    c.teachers = 500;
    c.students_per_teacher = 40;
    c.prior.mean = kTrueMean;
    c.prior.sd = kTrueSd;
    c.blind_noise_sd = c.teacher_noise_sd = 0.5;
    c.iat.enabled = false;
    const auto d = generate(c);
    const StudentIndex index(d.panel.students);
    const auto fit = estimate_system(d.panel.scores, index, Subject::math);
    const auto g = teacher_gaps(fit);
    const auto v = variance_decomposition(g.gaps);
    mean += v.mean / seeds;
    sd += v.sd_weighted / seeds;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  Outcome o;
  o.pass = std::abs(mean - kTrueMean) <= kMeanTol && std::abs(sd - kTrueSd) <= kSdTol && secs < kTimeLimit;
  o.detail = fmt::format("mean {:.4f} (truth {}), weighted SD {:.4f} (truth {}), {:.1f} s", mean, kTrueMean, sd,
                         kTrueSd, secs);
  return o;
}

Outcome shrinkage_dominance() {
  const double s = 0.2, phi = 0.1;
  const int J = 2000;
  int dominated = 0;
  double eb_total = 0.0, raw_total = 0.0;
  for (int seed = 1; seed <= 20; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
    std::normal_distribution<double> z;
    std::vector<double> truth, th, se(J, s);
    for (int j = 0; j < J; ++j) {
      truth.push_back(-0.3 + phi * z(rng));
      th.push_back(truth.back() + s * z(rng));
    }
    const auto g = gaps_from(th, se);
    const auto post = shrink(g, fit_gaussian_prior(variance_decomposition(g)));
    double eb = 0.0, raw = 0.0;
    for (int j = 0; j < J; ++j) {
      eb += std::pow(post[j].theta_star - truth[j], 2);
      raw += std::pow(th[j] - truth[j], 2);
    }
    dominated += eb <= raw;
    eb_total += eb;
    raw_total += raw;
  }
  const double ratio = eb_total / raw_total;
  return {dominated == 20 && std::abs(ratio - kRatioTarget) <= kRatioTol,
          fmt::format("EB beats raw on {}/20 seeds, MSE ratio {:.4f} (theory {})", dominated, ratio, kRatioTarget)};
}

Outcome deconvolution() {
  std::mt19937 rng(11);
  std::normal_distribution<double> z;
  std::vector<double> th, se;
  for (int j = 0; j < 2000; ++j) {
    const double mu = (j % 2 ? -0.4 : -0.1) + 0.05 * z(rng);
    th.push_back(mu + 0.05 * z(rng));
    se.push_back(0.05);
  }
  DeconvOptions o;
  o.c0 = 0.0;
  const DiscretePrior p = deconvolve(th, se, o);
  std::vector<double> modes;
  const double top = p.g.maxCoeff();
  for (Eigen::Index k = 1; k + 1 < p.g.size(); ++k)
    if (p.g(k) > p.g(k - 1) && p.g(k) >= p.g(k + 1) && p.g(k) > 0.2 * top) modes.push_back(p.grid(k));
  const bool modes_ok = modes.size() == 2 && std::abs(modes[0] + 0.4) <= kModeTol && std::abs(modes[1] + 0.1) <= kModeTol;

  const auto gaps = gaps_from(th, se);
  const auto d = variance_decomposition(gaps);
  bool moments_ok = false;
  std::string cal;
  try {
    const auto c = calibrate_penalty(gaps, d);
    const double em = std::abs(c.prior.mean() - d.mean) / std::abs(d.mean);
    const double ev = std::abs(c.prior.variance() - d.var_weighted) / d.var_weighted;
    moments_ok = em <= kMomentTol && ev <= kMomentTol;
    cal = fmt::format("c0 {:.4g}: mean {:.4f}/{:.4f} ({:.1f}%), var {:.5f}/{:.5f} ({:.1f}%)", c.c0, c.prior.mean(),
                      d.mean, 100 * em, c.prior.variance(), d.var_weighted, 100 * ev);
  } catch (const std::exception& e) {
    cal = fmt::format("calibration error: {}", e.what());
  }

  // analytic gradient against central differences
  double worst = 0.0;
  std::mt19937 r2(12);
  const VectorXd grid = make_grid({});
  const MatrixXd q = spline_basis(grid, 5);
  for (int inst = 0; inst < 10; ++inst) {
    std::vector<double> t, s;
    for (int j = 0; j < 200; ++j) {
      t.push_back(-0.3 + 0.25 * z(r2));
      s.push_back(0.03 + 0.1 * std::abs(z(r2)));
    }
    VectorXd alpha(5);
    for (int k = 0; k < 5; ++k) alpha(k) = 2.0 * z(r2);
    const auto l = deconv_loglik(alpha, q, grid, t, s, false);
    for (Eigen::Index k = 0; k < 5; ++k) {
      const double h = 1e-5 * std::max(1.0, std::abs(alpha(k)));
      VectorXd up = alpha, dn = alpha;
      up(k) += h;
      dn(k) -= h;
      const double fd = (deconv_loglik(up, q, grid, t, s, false).value - deconv_loglik(dn, q, grid, t, s, false).value) / (2 * h);
      worst = std::max(worst, std::abs(l.gradient(k) - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  const bool grad_ok = worst <= kGradTol;
  std::string mode_text;
  for (double m : modes) mode_text += fmt::format(" {:.4f}", m);
  return {modes_ok && moments_ok && grad_ok,
          fmt::format("modes{}; {}; worst gradient rel. error {:.2e}", mode_text, cal, worst)};
}

Outcome regression_engine() {
  using namespace regress;
  std::mt19937 rng(2024);
  std::normal_distribution<double> z;
  double coef_err = 0.0, cov_err = 0.0;
  for (int inst = 0; inst < 50; ++inst) {
    const int n = 20 + inst % 41, groups = 3 + inst % 4, years = 2 + inst % 3;
    Vector y(n), x1(n), x2(n);
    std::vector<long long> g(n), t(n);
    for (int i = 0; i < n; ++i) {
      g[i] = i < groups ? i : rng() % groups;
      t[i] = i < years ? i : rng() % years;
      x1(i) = z(rng) + 0.2 * g[i];
      x2(i) = z(rng);
      y(i) = x1(i) - 0.5 * x2(i) + 0.3 * g[i] - 0.2 * t[i] + z(rng);
    }
    Design d(n);
    d.add("x1", x1);
    d.add("x2", x2);
    RegressionSpec spec;
    const Factor fg = Factor::from_ints("g", g), ft = Factor::from_ints("t", t);
    spec.fixed_effects = {fg, ft};
    const Fit f = fit(y, d, spec);

    const int p = 2 + groups + years - 1;
    Matrix X = Matrix::Zero(n, p);
    for (int i = 0; i < n; ++i) {
      X(i, 0) = x1(i);
      X(i, 1) = x2(i);
      X(i, 2 + g[i]) = 1.0;
      if (t[i] > 0) X(i, 2 + groups + t[i] - 1) = 1.0;
    }
    const Matrix inv = (X.transpose() * X).inverse();
    const Vector b = inv * X.transpose() * y;
    coef_err = std::max({coef_err, std::abs(f.coefficient("x1") - b(0)), std::abs(f.coefficient("x2") - b(1))});

    // one-way sandwich by cluster g; the g effects sit inside the clusters and are not counted
    const Vector e = y - X * b;
    Matrix meat = Matrix::Zero(p, p);
    for (int c = 0; c < groups; ++c) {
      Vector sc = Vector::Zero(p);
      for (int i = 0; i < n; ++i)
        if (g[i] == c) sc += X.row(i).transpose() * e(i);
      meat += sc * sc.transpose();
    }
    const double K = 2 + years;  // t is not nested in g and carries the constant
    const double adj = groups / (groups - 1.0) * (n - 1.0) / (n - K);
    const Matrix V = adj * inv * meat * inv;
    const auto cov = cluster_covariance(f, {fg});
    for (int a = 0; a < 2; ++a)
      for (int c = 0; c < 2; ++c) cov_err = std::max(cov_err, std::abs(cov.cov(a, c) - V(a, c)));
  }
  return {coef_err <= kCoefTol && cov_err <= kSandwichTol,
          fmt::format("50 instances, max coefficient gap {:.2e}, max covariance gap {:.2e}", coef_err, cov_err)};
}

Outcome effects_recovery() {
  EffectsDgp c;
  c.seed = 2026;
  c.students = 100000;
  c.schools = 500;
  c.d1 = kDelta1;
  const EffectsSample s = generate_effects_sample(c);
  EffectsSpec spec;
  spec.cluster = ClusterSpec::student_school;
  const auto r = estimate_effects(s, s.outcome, "y", spec);
  const auto* d1 = r.find("theta_x_female");
  const bool recovered = d1 && std::abs(d1->estimate - kDelta1) <= kSeMultiple * d1->se;

  int rejected = 0;
  const int reps = 200;
  for (int rep = 0; rep < reps; ++rep) {
    EffectsDgp n;
    n.seed = 10000 + static_cast<std::uint64_t>(rep);
    n.students = 2000;
    n.schools = 100;
    n.d1 = 0.0;
    const EffectsSample ns = generate_effects_sample(n);
    const auto nr = estimate_effects(ns, ns.outcome, "y", spec);
    const auto* k = nr.find("theta_x_female");
    if (k && k->p < 0.05) ++rejected;
  }
  const double rate = static_cast<double>(rejected) / reps;
  return {recovered && std::abs(rate - kRejectTarget) <= kRejectTol,
          fmt::format("delta1 {:.4f} (se {:.4f}, truth {}); null rejection rate {:.3f} over {} replications",
                      d1 ? d1->estimate : NAN, d1 ? d1->se : NAN, kDelta1, rate, reps)};
}

Outcome loo_integrity() {
  DgpConfig c;
  c.seed = 41;
  c.teachers = 60;
  c.students_per_teacher = 40;
  c.blind_noise_sd = c.teacher_noise_sd = 0.3;
  c.iat.enabled = false;
  const auto d = generate(c);
  const auto ex = exam_years_by_cohort(d.panel.scores, d.panel.students, Subject::math);
  const auto base = leave_one_year_out(d.panel.scores, d.panel.students, ex);
  bool all_untouched = true, any_other = true;
  std::string detail;
  for (const auto& [cohort, years] : ex) {
    auto scores = d.panel.scores;
    std::mt19937 rng(static_cast<unsigned>(cohort));
    std::normal_distribution<double> z;
    for (auto& o : scores)
      if (years.count(o.school_year)) {
        o.teacher_score += z(rng);
        o.blind_score += z(rng);
      }
    const auto p = leave_one_year_out(scores, d.panel.students, ex);
    // bitwise comparison of every value
    bool same = true;
    const auto& a = base.for_cohort(cohort).value;
    const auto& b = p.for_cohort(cohort).value;
    same = a.size() == b.size();
    for (const auto& [id, v] : a) {
      auto it = b.find(id);
      same = same && it != b.end() && std::memcmp(&v, &it->second, sizeof v) == 0;
    }
    bool other = false;
    for (const auto& [k, _] : ex)
      if (k != cohort) other = other || p.for_cohort(k).value != base.for_cohort(k).value;
    all_untouched = all_untouched && same;
    any_other = any_other && other;
    detail += fmt::format(" {}:{}{}", cohort, same ? "same" : "CHANGED", other ? "/others moved" : "/others fixed");
  }
  return {all_untouched && any_other, fmt::format("cohorts{}", detail)};
}

std::vector<IatTrial> random_log(std::mt19937& rng, const std::string& id, double shift, int n = 20) {
  std::lognormal_distribution<double> lat(std::log(800.0), 0.3);
  std::bernoulli_distribution err(0.08);
  std::vector<IatTrial> out;
  long long k = 0;
  for (IatBlock b : {IatBlock::practice_compatible, IatBlock::test_compatible, IatBlock::practice_incompatible,
                     IatBlock::test_incompatible}) {
    const bool incompatible = b == IatBlock::practice_incompatible || b == IatBlock::test_incompatible;
    for (int i = 0; i < n; ++i)
      out.push_back({id, b, k++, std::max(310.0, lat(rng) + (incompatible ? shift : 0.0)), !err(rng)});
  }
  return out;
}

IatBlock swap_block(IatBlock b) {
  switch (b) {
    case IatBlock::practice_compatible: return IatBlock::practice_incompatible;
    case IatBlock::practice_incompatible: return IatBlock::practice_compatible;
    case IatBlock::test_compatible: return IatBlock::test_incompatible;
    case IatBlock::test_incompatible: return IatBlock::test_compatible;
  }
  return b;
}

Outcome iat_scorer() {
  std::vector<IatTrial> hand;
  long long k = 0;
  for (double l : {600.0, 800.0}) hand.push_back({"r", IatBlock::test_compatible, k++, l, true});
  for (double l : {900.0, 1100.0}) hand.push_back({"r", IatBlock::test_incompatible, k++, l, true});
  IatOptions ho;
  ho.min_trials = 2;
  const double d_hand = score_iat(hand, ho).d_score;
  const bool hand_ok = std::abs(d_hand - kHandD) <= kHandTol;
  const bool class_ok = classify(0.301) == IatCategory::slight;

  std::mt19937 rng(5);
  int scale_bad = 0, swap_bad = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const auto t = random_log(rng, "r", 40.0 * (rep % 21) - 400.0);
    const double d = score_iat(t).d_score;
    auto scaled = t;
    const double c = 0.25 + 0.01 * (rep % 300);
    for (auto& x : scaled) x.latency_ms *= c;
    IatOptions o;
    o.slow_ms *= c;
    o.fast_ms *= c;
    o.error_penalty_ms *= c;
    if (std::abs(score_iat(scaled, o).d_score - d) > 1e-12) ++scale_bad;
    auto swapped = t;
    for (auto& x : swapped) x.block = swap_block(x.block);
    if (score_iat(swapped).d_score != -d) ++swap_bad;
  }
  return {hand_ok && class_ok && scale_bad == 0 && swap_bad == 0,
          fmt::format("hand example D {:.4f} (expected {}); classify(0.301) = {}; scale violations {}/1000, "
                      "swap violations {}/1000",
                      d_hand, kHandD, to_string(classify(0.301)), scale_bad, swap_bad)};
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().filename() == "manifest.json") continue;
    std::ifstream f(e.path(), std::ios::binary);
    out[fs::relative(e.path(), root).generic_string()] = {std::istreambuf_iterator<char>(f), {}};
  }
  return out;
}

Outcome cli_determinism() {
  const fs::path base = fs::temp_directory_path() / fmt::format("gradegap_accept_{}", ::getpid());
  fs::remove_all(base);
  fs::create_directories(base);
  {
    std::ofstream(base / "dgp.json") << R"({"seed":19,"teachers":400,"students_per_teacher":40,"noise_sd":0.1})";
  }
  std::vector<std::map<std::string, std::string>> runs;
  std::string failure;
  for (int threads : {1, 2, 8}) {
    const fs::path w = base / fmt::format("t{}", threads);
    const std::string th = std::to_string(threads), in = w.string();
    const std::vector<std::vector<std::string>> steps = {
        {"simulate", "--config", (base / "dgp.json").string(), "--out", in + "/sim"},
        {"gaps", "--in", in + "/sim", "--out", in + "/gaps"},
        {"hetero", "--in", in + "/gaps", "--panel", in + "/sim", "--out", in + "/hetero"},
        {"eb", "--in", in + "/gaps", "--out", in + "/eb"},
        {"eb", "--in", in + "/gaps", "--method", "deconvolve", "--calibrate", "--out", in + "/deconv"},
        {"iat-score", "--in", in + "/sim", "--out", in + "/iat"},
        {"effects", "--in", in + "/sim", "--iat", in + "/iat/iat_scores.csv", "--out", in + "/effects"},
        {"report", "--in", in + "/effects", "--out", in + "/report"}};
    for (auto args : steps) {
      args.push_back("--threads");
      args.push_back(th);
      std::ostringstream out, err;
      if (cli::run(args, out, err) != 0 && failure.empty())
        failure = fmt::format("{} failed at {} threads: {}", args[0], threads, err.str());
    }
    // paths inside artifacts never mention the thread directory
    runs.push_back(snapshot(w));
  }
  fs::remove_all(base);
  std::size_t differing = 0;
  for (std::size_t i = 1; i < runs.size(); ++i)
    for (const auto& [name, bytes] : runs[0]) {
      auto it = runs[i].find(name);
      if (it == runs[i].end() || it->second != bytes) ++differing;
    }
  const bool same_set = runs[0].size() == runs[1].size() && runs[0].size() == runs[2].size();
  return {failure.empty() && differing == 0 && same_set && runs[0].size() > 20,
          failure.empty() ? fmt::format("{} artifacts compared at 1/2/8 threads, {} differ", runs[0].size(), differing)
                          : failure};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"1 gap recovery", gap_recovery},
      {"2 shrinkage dominance", shrinkage_dominance},
      {"3 deconvolution", deconvolution},
      {"4 regression engine", regression_engine},
      {"5 effects recovery and size", effects_recovery},
      {"6 leave-one-year-out integrity", loo_integrity},
      {"7 IAT scorer", iat_scorer},
      {"8 CLI determinism", cli_determinism},
  };
  set_thread_count(std::max(1u, std::thread::hardware_concurrency()));
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, fmt::format("threw: {}", e.what())};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    fmt::print("[{}] {}: {} ({:.1f} s)\n", o.pass ? "PASS" : "FAIL", name, o.detail, secs);
    std::fflush(stdout);
  }
  fmt::print("{} of {} criteria passed\n", criteria.size() - failed, criteria.size());
  return failed;
}
