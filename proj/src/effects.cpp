#include "gradegap/effects.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "gradegap/error.hpp"
#include "gradegap/heterogeneity.hpp"
#include "gradegap/table.hpp"

namespace gradegap {

using regress::Factor;
using Eigen::Index;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

LooTreatment fit_treatment(std::span<const ScoreObservation> obs, const StudentIndex& index,
                           const std::set<int>& excluded, std::optional<int> cohort, const LooOptions& options) {
  LooTreatment t;
  t.cohort = cohort;
  t.excluded = excluded;
  std::vector<ScoreObservation> kept;
  for (const auto& o : obs)
    if (o.subject == options.subject && !excluded.count(o.school_year)) kept.push_back(o);
  const std::string label = cohort ? fmt::format("cohort {}", *cohort) : std::string("all years");
  if (kept.empty()) {
    t.flags.push_back(fmt::format("{}: no score rows outside the excluded years", label));
    return t;
  }
  try {
    const SystemFit fit = estimate_system(kept, index, options.subject, options.covariates);
    GapResult gaps = teacher_gaps(fit, options.min_cell, options.mode);
    t.gaps = std::move(gaps.gaps);
  } catch (const ValidationError& e) {
    t.flags.push_back(fmt::format("{}: {}", label, e.what()));
    return t;
  }
  if (t.gaps.size() < 2) {
    t.flags.push_back(fmt::format("{}: fewer than two teachers with a gap estimate", label));
    return t;
  }
  const VarianceDecomposition d = variance_decomposition(t.gaps);
  if (!(d.sd_weighted > 0.0)) {
    t.flags.push_back(fmt::format("{}: bias-corrected variance is not positive", label));
    return t;
  }
  t.posteriors = shrink(t.gaps, fit_gaussian_prior(d));
  double sum = 0.0;
  for (const auto& p : t.posteriors) sum += p.theta_star;
  t.center = sum / static_cast<double>(t.posteriors.size());
  t.scale = d.sd_weighted;
  for (const auto& p : t.posteriors) t.value[p.teacher_id] = (p.theta_star - t.center) / t.scale;
  return t;
}

std::string fe_key(FixedEffect f, const ExposureRow& r) {
  switch (f) {
    case FixedEffect::cohort: return std::to_string(r.cohort);
    case FixedEffect::grade: return std::to_string(r.grade);
    case FixedEffect::year: return std::to_string(r.school_year);
    case FixedEffect::school: return r.school_id;
    case FixedEffect::school_location: return r.school_location;
    case FixedEffect::location_x_gender: return r.school_location + (r.female ? "|f" : "|m");
  }
  return {};
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

CohortExclusions exam_years_by_cohort(std::span<const ScoreObservation> obs, std::span<const StudentRecord> students,
                                      Subject subject) {
  const StudentIndex index(students);
  CohortExclusions out;
  for (const auto& o : obs) {
    if (o.subject != subject) continue;
    if (const StudentRecord* s = index.find(o.student_id, o.school_year))
      out[s->cohort_projected_grad].insert(o.school_year);
  }
  return out;
}

const LooTreatment& LooResult::for_cohort(int cohort) const {
  for (const auto& t : cohorts)
    if (t.cohort == cohort) return t;
  return all_years;
}

LooResult leave_one_year_out(std::span<const ScoreObservation> obs, std::span<const StudentRecord> students,
                             const CohortExclusions& exclusions, const LooOptions& options) {
  const StudentIndex index(students);
  LooResult out;
  for (const auto& [cohort, years] : exclusions) out.cohorts.push_back(fit_treatment(obs, index, years, cohort, options));
  out.all_years = fit_treatment(obs, index, {}, std::nullopt, options);
  return out;
}

void check_loo_provenance(const LooResult& loo) {
  auto one = [](const LooTreatment& t) {
    for (const auto& g : t.gaps)
      for (int y : g.years_used)
        if (t.excluded.count(y))
          throw ValidationError(fmt::format("treatment for cohort {} uses excluded year {} (teacher {})",
                                            t.cohort.value_or(0), y, g.teacher_id));
  };
  for (const auto& t : loo.cohorts) one(t);
  one(loo.all_years);
}

EffectsSample build_exposure(std::span<const ScoreObservation> obs, std::span<const StudentRecord> students,
                             std::span<const TeacherRecord> teachers, const LooResult& loo,
                             const ExposureOptions& options) {
  const StudentIndex index(students);
  std::map<std::string, const TeacherRecord*> teacher_of;
  for (const auto& t : teachers)
    if (t.subject == options.subject || !teacher_of.count(t.teacher_id)) teacher_of[t.teacher_id] = &t;

  // group means of the lagged math score
  std::map<std::string, std::pair<double, double>> class_sum;
  std::map<std::tuple<std::string, int, int>, std::pair<double, double>> school_grade_sum;
  for (const auto& o : obs) {
    if (o.subject != options.subject || std::isnan(o.lagged_math)) continue;
    const StudentRecord* s = index.find(o.student_id, o.school_year);
    if (!s) continue;
    auto& c = class_sum[s->classroom_id];
    c.first += o.lagged_math;
    c.second += 1.0;
    auto& g = school_grade_sum[{s->school_id, s->grade, o.school_year}];
    g.first += o.lagged_math;
    g.second += 1.0;
  }

  EffectsSample out;
  auto& names = out.covariate_names;
  names = {"lag_math", "lag_math_sq", "lag_math_missing", "lag_language", "lag_language_sq", "lag_language_missing",
           "age_years", "cct", "cct_missing"};
  const std::vector<std::string> traits = {"teacher_female", "teacher_age", "teacher_university", "teacher_missing"};
  if (options.teacher_traits)
    for (const auto& t : traits) {
      names.push_back(t);
      names.push_back(t + "_x_female");
    }
  if (options.group_means) {
    names.push_back("class_mean_lag_math");
    names.push_back("school_grade_mean_lag_math");
    if (options.interact_group_means) {
      names.push_back("class_mean_lag_math_x_female");
      names.push_back("school_grade_mean_lag_math_x_female");
    }
  }

  std::map<const LooTreatment*, std::map<std::string, std::set<int>>> years_of;
  auto provenance = [&](const LooTreatment& t, const std::string& teacher) -> const std::set<int>& {
    auto& m = years_of[&t];
    if (m.empty())
      for (const auto& g : t.gaps) m[g.teacher_id] = g.years_used;
    static const std::set<int> none;
    auto it = m.find(teacher);
    return it == m.end() ? none : it->second;
  };

  for (const auto& o : obs) {
    if (o.subject != options.subject) continue;
    const StudentRecord* s = index.find(o.student_id, o.school_year);
    if (!s || !options.grades.count(s->grade)) continue;
    const LooTreatment& treat = loo.for_cohort(s->cohort_projected_grad);
    auto v = treat.value.find(o.teacher_id);
    if (v == treat.value.end()) {
      ++out.excluded_no_treatment;
      continue;
    }
    ExposureRow r;
    r.student_id = o.student_id;
    r.grade = s->grade;
    r.school_year = o.school_year;
    r.subject = o.subject;
    r.teacher_id = o.teacher_id;
    r.treatment = v->second;
    r.female = s->female;
    r.cohort = s->cohort_projected_grad;
    r.school_id = s->school_id;
    const auto t = teacher_of.find(o.teacher_id);
    const TeacherRecord* tr = t == teacher_of.end() ? nullptr : t->second;
    r.school_location = tr ? tr->school_location : std::string();
    r.provenance = provenance(treat, o.teacher_id);

    const double f = s->female ? 1.0 : 0.0;
    auto lag = [&](double z) {
      const bool miss = std::isnan(z);
      r.covariates.push_back(miss ? 0.0 : z);
      r.covariates.push_back(miss ? 0.0 : z * z);
      r.covariates.push_back(miss ? 1.0 : 0.0);
    };
    lag(o.lagged_math);
    lag(o.lagged_language);
    r.covariates.push_back(s->age_months / 12.0);
    r.covariates.push_back(s->cct_flag.value_or(false) ? 1.0 : 0.0);
    r.covariates.push_back(s->cct_flag ? 0.0 : 1.0);
    if (options.teacher_traits) {
      const std::array<double, 4> vals = {tr && tr->female ? 1.0 : 0.0, tr ? static_cast<double>(tr->age_years) : 0.0,
                                          tr && tr->higher_ed_university ? 1.0 : 0.0, tr ? 0.0 : 1.0};
      for (double x : vals) {
        r.covariates.push_back(x);
        r.covariates.push_back(x * f);
      }
    }
    if (options.group_means) {
      const auto& c = class_sum[s->classroom_id];
      const auto& g = school_grade_sum[{s->school_id, s->grade, o.school_year}];
      const double cm = c.second > 0 ? c.first / c.second : 0.0;
      const double gm = g.second > 0 ? g.first / g.second : 0.0;
      r.covariates.push_back(cm);
      r.covariates.push_back(gm);
      if (options.interact_group_means) {
        r.covariates.push_back(cm * f);
        r.covariates.push_back(gm * f);
      }
    }
    out.rows.push_back(std::move(r));
  }
  return out;
}

std::map<std::string, OutcomeRecord> build_all_outcomes(const Panel& panel, const EverHorizon& horizon,
                                                        std::span<const AgeBin> bins, int spell_window) {
  std::map<std::string, std::vector<EducationEvent>> events;
  for (const auto& e : panel.events) events[e.student_id].push_back(e);
  std::map<std::string, std::vector<EmploymentMonth>> months;
  for (const auto& m : panel.employment) months[m.worker_id].push_back(m);
  static const std::vector<EducationEvent> no_events;
  static const std::vector<EmploymentMonth> no_months;
  std::map<std::string, OutcomeRecord> out;
  for (const auto& [id, cohort] : projected_graduation_years(panel.students)) {
    auto e = events.find(id);
    auto m = months.find(id);
    out.emplace(id, build_outcomes(id, cohort, e == events.end() ? no_events : e->second,
                                   m == months.end() ? no_months : m->second, horizon, bins, spell_window));
  }
  return out;
}

EverHorizon default_ever_horizon(const Panel& panel) {
  int last = std::numeric_limits<int>::min();
  for (const auto& e : panel.events) last = std::max(last, e.year);
  EverHorizon h;
  for (const auto& [id, cohort] : projected_graduation_years(panel.students))
    h[cohort] = last == std::numeric_limits<int>::min() ? 1 : std::max(1, last - cohort);
  return h;
}

EffectsSample replace_treatment(const EffectsSample& sample, const std::map<std::string, double>& by_teacher) {
  EffectsSample out;
  out.covariate_names = sample.covariate_names;
  out.truth = sample.truth;
  out.excluded_no_treatment = sample.excluded_no_treatment;
  const bool with_outcome = sample.outcome.size() == sample.rows.size();
  for (std::size_t i = 0; i < sample.rows.size(); ++i) {
    auto it = by_teacher.find(sample.rows[i].teacher_id);
    if (it == by_teacher.end()) {
      ++out.excluded_no_treatment;
      continue;
    }
    out.rows.push_back(sample.rows[i]);
    out.rows.back().treatment = it->second;
    out.rows.back().provenance.clear();
    if (with_outcome) out.outcome.push_back(sample.outcome[i]);
  }
  return out;
}

std::vector<double> outcome_column(const EffectsSample& sample, const std::map<std::string, OutcomeRecord>& outcomes,
                                   std::span<const AgeBin> bins, std::span<const StudentIat> student_iat,
                                   const std::string& name) {
  std::vector<double> y(sample.rows.size(), kNaN);
  if (name == "student_iat") {
    std::map<std::string, double> iat;
    for (const auto& s : student_iat) iat.emplace(s.student_id, s.d_score);  // first row per student
    for (std::size_t i = 0; i < y.size(); ++i) {
      auto it = iat.find(sample.rows[i].student_id);
      if (it != iat.end()) y[i] = it->second;
    }
    return y;
  }
  std::string measure = name;
  std::optional<std::size_t> bin;
  if (const auto at = name.find('@'); at != std::string::npos) {
    measure = name.substr(0, at);
    const std::string label = name.substr(at + 1);
    for (std::size_t b = 0; b < bins.size(); ++b)
      if (bins[b].label == label) bin = b;
    if (!bin) throw ValidationError(fmt::format("unknown age bin '{}' in outcome '{}'", label, name));
  }
  auto get = [&](const OutcomeRecord& o) -> std::optional<double> {
    auto b = [](bool v) { return v ? 1.0 : 0.0; };
    if (!bin) {
      if (measure == "grad_on_time") return b(o.grad_on_time);
      if (measure == "grad_ever") return b(o.grad_ever);
      if (measure == "college_applied_on_time") return b(o.college_applied_on_time);
      if (measure == "college_applied_ever") return b(o.college_applied_ever);
      if (measure == "college_admitted_on_time") return b(o.college_admitted_on_time);
      if (measure == "college_admitted_ever") return b(o.college_admitted_ever);
      if (measure == "college_enrolled_on_time") return b(o.college_enrolled_on_time);
      if (measure == "college_enrolled_ever") return b(o.college_enrolled_ever);
      return std::nullopt;
    }
    if (*bin >= o.labor.size()) return kNaN;
    const LaborOutcome& l = o.labor[*bin];
    if (measure == "employed_formal") return b(l.employed_formal);
    if (measure == "earnings_uncond") return l.earnings_uncond;
    if (measure == "earnings_cond") return l.earnings_cond;
    if (measure == "hours_uncond") return l.hours_uncond;
    if (measure == "hours_cond") return l.hours_cond;
    return std::nullopt;
  };
  for (std::size_t i = 0; i < y.size(); ++i) {
    auto it = outcomes.find(sample.rows[i].student_id);
    if (it == outcomes.end()) continue;
    auto v = get(it->second);
    if (!v) throw ValidationError(fmt::format("unknown outcome '{}'", name));
    y[i] = *v;
  }
  return y;
}

std::string_view to_string(FixedEffect f) {
  switch (f) {
    case FixedEffect::cohort: return "cohort";
    case FixedEffect::grade: return "grade";
    case FixedEffect::year: return "year";
    case FixedEffect::school: return "school";
    case FixedEffect::school_location: return "school_location";
    case FixedEffect::location_x_gender: return "location_x_gender";
  }
  return "?";
}

std::optional<FixedEffect> parse_fixed_effect(std::string_view s) {
  for (auto f : {FixedEffect::cohort, FixedEffect::grade, FixedEffect::year, FixedEffect::school,
                 FixedEffect::school_location, FixedEffect::location_x_gender})
    if (to_string(f) == s) return f;
  return std::nullopt;
}

std::string_view to_string(ClusterSpec c) {
  switch (c) {
    case ClusterSpec::school: return "school";
    case ClusterSpec::student_school: return "student+school";
    case ClusterSpec::location_x_gender: return "location_x_gender";
  }
  return "?";
}

std::optional<ClusterSpec> parse_cluster(std::string_view s) {
  if (s == "school") return ClusterSpec::school;
  if (s == "student+school" || s == "student_school" || s == "twoway") return ClusterSpec::student_school;
  if (s == "location_x_gender") return ClusterSpec::location_x_gender;
  return std::nullopt;
}

const regress::Coefficient* EffectsResult::find(const std::string& name) const {
  for (const auto& c : coefficients)
    if (c.name == name) return &c;
  return nullptr;
}

EffectsResult estimate_effects(const EffectsSample& sample, std::span<const double> outcome,
                               const std::string& outcome_name, const EffectsSpec& spec) {
  if (outcome.size() != sample.rows.size())
    throw ValidationError(fmt::format("outcome '{}' has {} values for {} rows", outcome_name, outcome.size(),
                                      sample.rows.size()));
  std::vector<std::size_t> use;
  for (std::size_t i = 0; i < outcome.size(); ++i)
    if (std::isfinite(outcome[i])) use.push_back(i);
  EffectsResult res;
  res.outcome = outcome_name;
  res.treatment = spec.treatment;
  if (use.size() < outcome.size())
    res.notices.push_back(fmt::format("{} rows without a defined outcome skipped", outcome.size() - use.size()));
  if (use.empty()) throw ValidationError(fmt::format("outcome '{}' is undefined for every row", outcome_name));

  const std::size_t n = use.size();
  const Index N = static_cast<Index>(n);
  regress::Vector y(N), tf(N), fem(N), tr(N);
  std::vector<double> yf, ym;
  for (std::size_t k = 0; k < n; ++k) {
    const ExposureRow& r = sample.rows[use[k]];
    const Index i = static_cast<Index>(k);
    y(i) = outcome[use[k]];
    fem(i) = r.female ? 1.0 : 0.0;
    tr(i) = r.treatment;
    tf(i) = r.treatment * fem(i);
    (r.female ? yf : ym).push_back(y(i));
  }
  regress::Design design(n);
  design.add(res.interaction_name(), tf);
  design.add("female", fem);
  design.add(spec.treatment, tr);
  for (std::size_t c = 0; c < sample.covariate_names.size(); ++c) {
    regress::Vector col(N);
    for (std::size_t k = 0; k < n; ++k) {
      const auto& cov = sample.rows[use[k]].covariates;
      if (cov.size() != sample.covariate_names.size())
        throw ValidationError("exposure row covariates do not match the covariate names");
      col(static_cast<Index>(k)) = cov[c];
    }
    design.add(sample.covariate_names[c], col);
  }

  regress::RegressionSpec rs;
  std::vector<std::string> fe_names;
  for (FixedEffect f : spec.fixed_effects) {
    std::vector<std::string> keys(n);
    for (std::size_t k = 0; k < n; ++k) keys[k] = fe_key(f, sample.rows[use[k]]);
    rs.fixed_effects.push_back(Factor::from_keys(std::string(to_string(f)), keys));
    fe_names.emplace_back(to_string(f));
  }
  rs.collinear = regress::CollinearPolicy::drop;
  rs.required = {res.interaction_name(), spec.treatment};
  rs.demean = spec.demean;
  const regress::Fit fit = regress::fit(y, design, rs);

  auto factor_of = [&](const char* name, auto key) {
    std::vector<std::string> keys(n);
    for (std::size_t k = 0; k < n; ++k) keys[k] = key(sample.rows[use[k]]);
    return Factor::from_keys(name, keys);
  };
  std::vector<Factor> clusters;
  switch (spec.cluster) {
    case ClusterSpec::school:
      clusters.push_back(factor_of("school", [](const ExposureRow& r) { return r.school_id; }));
      break;
    case ClusterSpec::student_school:
      clusters.push_back(factor_of("student", [](const ExposureRow& r) { return r.student_id; }));
      clusters.push_back(factor_of("school", [](const ExposureRow& r) { return r.school_id; }));
      break;
    case ClusterSpec::location_x_gender:
      clusters.push_back(factor_of("location_x_gender", [](const ExposureRow& r) {
        return r.school_location + (r.female ? "|f" : "|m");
      }));
      break;
  }
  const regress::CovarianceResult cov = regress::cluster_covariance(fit, clusters);

  res.coefficients = regress::coefficient_table(fit, cov);
  res.names = fit.names;
  res.cov = cov.cov;
  res.cov_repaired = cov.repaired;
  res.mean_female = mean_of(yf);
  res.mean_male = mean_of(ym);
  res.n = n;
  for (const auto& c : clusters) res.clusters.push_back(static_cast<std::size_t>(c.levels));
  res.fixed_effects = fmt::format("{}", fmt::join(fe_names, "+"));
  res.cluster = std::string(to_string(spec.cluster));
  res.dropped = fit.dropped;
  res.notices.insert(res.notices.end(), fit.notices.begin(), fit.notices.end());
  res.notices.insert(res.notices.end(), cov.warnings.begin(), cov.warnings.end());
  return res;
}

double reference_quantile(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw ValidationError("empty earnings reference population");
  if (p <= 0.0) return 0.0;
  if (p >= 100.0) return std::numeric_limits<double>::infinity();
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p / 100.0;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

std::vector<PercentileEffect> percentile_effects(const EffectsSample& sample, std::span<const double> earnings,
                                                 std::span<const double> reference, std::span<const double> grid,
                                                 const EffectsSpec& spec) {
  std::vector<double> ref;
  for (double v : reference)
    if (std::isfinite(v)) ref.push_back(v);
  if (ref.empty()) throw ValidationError("empty earnings reference population");
  std::sort(ref.begin(), ref.end());
  std::vector<PercentileEffect> out;
  for (double p : grid) {
    if (!(p >= 0.0 && p <= 100.0)) throw ValidationError(fmt::format("percentile {} outside [0, 100]", p));
    PercentileEffect e;
    e.percentile = p;
    e.threshold = reference_quantile(ref, p);
    std::vector<double> y(earnings.size());
    for (std::size_t i = 0; i < y.size(); ++i)
      y[i] = std::isnan(earnings[i]) ? kNaN : (earnings[i] > e.threshold ? 1.0 : 0.0);
    e.result = estimate_effects(sample, y, fmt::format("earnings_above_p{}", p), spec);
    out.push_back(std::move(e));
  }
  return out;
}

EffectsResult internalization(const EffectsSample& sample, std::span<const double> student_iat,
                              const std::string& treatment) {
  if (student_iat.size() != sample.rows.size()) throw ValidationError("student IAT column does not match the rows");
  double n = 0.0, s = 0.0;
  for (double v : student_iat)
    if (std::isfinite(v)) {
      n += 1.0;
      s += v;
    }
  if (n < 2.0) throw DegenerateError("student IAT outcome needs at least two scored students");
  const double m = s / n;
  double ss = 0.0;
  for (double v : student_iat)
    if (std::isfinite(v)) ss += (v - m) * (v - m);
  const double sd = std::sqrt(ss / n);
  if (!(sd > 0.0)) throw DegenerateError("student IAT outcome has zero variance");
  std::vector<double> z(student_iat.size(), kNaN);
  for (std::size_t i = 0; i < z.size(); ++i)
    if (std::isfinite(student_iat[i])) z[i] = (student_iat[i] - m) / sd;
  EffectsSpec spec;
  spec.fixed_effects = {FixedEffect::school, FixedEffect::grade};
  spec.cluster = ClusterSpec::school;
  spec.treatment = treatment;
  return estimate_effects(sample, z, "student_iat", spec);
}

void write_effects(const std::filesystem::path& path, std::span<const EffectsResult> results, char delimiter) {
  Table t;
  t.header = {"outcome", "treatment", "term", "estimate", "se", "t", "p", "n", "mean_female", "mean_male",
              "fixed_effects", "cluster", "clusters"};
  for (const auto& r : results) {
    std::vector<std::string> cl;
    for (auto c : r.clusters) cl.push_back(std::to_string(c));
    for (const auto& c : r.coefficients)
      t.rows.push_back({r.outcome, r.treatment, c.name, format_double(c.estimate), format_double(c.se),
                        format_double(c.t), format_double(c.p), std::to_string(r.n), format_double(r.mean_female),
                        format_double(r.mean_male), r.fixed_effects, r.cluster, fmt::format("{}", fmt::join(cl, ";"))});
  }
  write_table(path, t, delimiter);
}

std::vector<EffectsResult> load_effects(const std::filesystem::path& path, char delimiter) {
  const Table t = read_table(path, delimiter);
  const std::size_t c_out = t.require_column("outcome"), c_tr = t.require_column("treatment"),
                    c_term = t.require_column("term"), c_est = t.require_column("estimate"),
                    c_se = t.require_column("se"), c_t = t.require_column("t"), c_p = t.require_column("p"),
                    c_n = t.require_column("n"), c_mf = t.require_column("mean_female"),
                    c_mm = t.require_column("mean_male"), c_fe = t.require_column("fixed_effects"),
                    c_cl = t.require_column("cluster"), c_cls = t.require_column("clusters");
  std::vector<EffectsResult> out;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    if (row.size() < t.header.size()) throw SchemaError(fmt::format("{} row {}: too few fields", path.string(), i + 2));
    if (out.empty() || out.back().outcome != row[c_out] || out.back().treatment != row[c_tr]) {
      EffectsResult r;
      r.outcome = row[c_out];
      r.treatment = row[c_tr];
      auto n = parse_int(row[c_n]);
      auto mf = parse_double(row[c_mf]), mm = parse_double(row[c_mm]);
      if (!n || !mf || !mm) throw SchemaError(fmt::format("{} row {}: bad numeric field", path.string(), i + 2));
      r.n = static_cast<std::size_t>(*n);
      r.mean_female = *mf;
      r.mean_male = *mm;
      r.fixed_effects = row[c_fe];
      r.cluster = row[c_cl];
      std::string_view rest = row[c_cls];
      while (!rest.empty()) {
        const auto cut = rest.find(';');
        if (auto v = parse_int(rest.substr(0, cut))) r.clusters.push_back(static_cast<std::size_t>(*v));
        rest = cut == std::string_view::npos ? std::string_view{} : rest.substr(cut + 1);
      }
      out.push_back(std::move(r));
    }
    regress::Coefficient c;
    c.name = row[c_term];
    auto e = parse_double(row[c_est]), se = parse_double(row[c_se]), tv = parse_double(row[c_t]),
         p = parse_double(row[c_p]);
    if (!e || !se || !tv || !p) throw SchemaError(fmt::format("{} row {}: bad numeric field", path.string(), i + 2));
    c.estimate = *e;
    c.se = *se;
    c.t = *tv;
    c.p = *p;
    out.back().names.push_back(c.name);
    out.back().coefficients.push_back(c);
  }
  return out;
}

nlohmann::json effects_report(const EffectsResult& r) {
  nlohmann::json j;
  j["outcome"] = r.outcome;
  j["treatment"] = r.treatment;
  j["coefficients"] = nlohmann::json::array();
  for (const auto& c : r.coefficients)
    j["coefficients"].push_back({{"term", c.name}, {"estimate", c.estimate}, {"se", c.se}, {"t", c.t}, {"p", c.p}});
  if (r.cov.size() > 0) {
    nlohmann::json m = nlohmann::json::array();
    for (Index i = 0; i < r.cov.rows(); ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (Index k = 0; k < r.cov.cols(); ++k) row.push_back(r.cov(i, k));
      m.push_back(row);
    }
    j["covariance"] = {{"terms", r.names}, {"matrix", m}};
  }
  j["mean_female"] = r.mean_female;
  j["mean_male"] = r.mean_male;
  j["n"] = r.n;
  j["fixed_effects"] = r.fixed_effects;
  j["cluster"] = r.cluster;
  j["clusters"] = r.clusters;
  j["dropped"] = r.dropped;
  j["notices"] = r.notices;
  return j;
}

std::string format_effects_table(std::span<const EffectsResult> columns) {
  if (columns.empty()) return {};
  constexpr int label_w = 26, col_w = 16;
  std::string out = fmt::format("{:<{}}", "", label_w);
  for (std::size_t c = 0; c < columns.size(); ++c) out += fmt::format("{:>{}}", fmt::format("({})", c + 1), col_w);
  out += '\n' + fmt::format("{:<{}}", "", label_w);
  for (const auto& c : columns) {
    std::string name = c.outcome.size() > col_w - 1 ? c.outcome.substr(0, col_w - 1) : c.outcome;
    out += fmt::format("{:>{}}", name, col_w);
  }
  out += '\n';
  const auto& first = columns.front();
  const std::vector<std::pair<std::string, std::string>> terms = {
      {first.interaction_name(), fmt::format("{} x Female", first.treatment)},
      {"female", "Female"},
      {first.treatment, first.treatment}};
  for (const auto& [term, label] : terms) {
    std::string est = fmt::format("{:<{}}", label, label_w), se = fmt::format("{:<{}}", "", label_w);
    for (const auto& c : columns) {
      const auto* k = c.find(term == first.interaction_name() ? c.interaction_name() : term == first.treatment ? c.treatment : term);
      est += fmt::format("{:>{}}", k ? fmt::format("{:.4f}", k->estimate) : std::string("."), col_w);
      se += fmt::format("{:>{}}", k ? fmt::format("({:.4f})", k->se) : std::string(""), col_w);
    }
    out += est + '\n' + se + '\n';
  }
  std::string yf = fmt::format("{:<{}}", "Mean outcome, female", label_w);
  std::string ym = fmt::format("{:<{}}", "Mean outcome, male", label_w);
  std::string nn = fmt::format("{:<{}}", "Observations", label_w);
  std::string fe = fmt::format("{:<{}}", "Fixed effects", label_w);
  std::string cl = fmt::format("{:<{}}", "Clustering", label_w);
  for (const auto& c : columns) {
    yf += fmt::format("{:>{}.4f}", c.mean_female, col_w);
    ym += fmt::format("{:>{}.4f}", c.mean_male, col_w);
    nn += fmt::format("{:>{}}", c.n, col_w);
    fe += fmt::format("{:>{}}", c.fixed_effects.empty() ? std::string("none") : c.fixed_effects, col_w);
    cl += fmt::format("{:>{}}", c.cluster, col_w);
  }
  out += yf + '\n' + ym + '\n' + nn + '\n' + fe + '\n' + cl + '\n';
  return out;
}

}  // namespace gradegap
