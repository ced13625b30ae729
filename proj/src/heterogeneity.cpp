#include "gradegap/heterogeneity.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "gradegap/error.hpp"

namespace gradegap {

using regress::Design;
using regress::Factor;
using regress::Vector;

namespace {

std::vector<const TeacherGapEstimate*> sorted_by_id(std::span<const TeacherGapEstimate> gaps) {
  std::vector<const TeacherGapEstimate*> out;
  for (const auto& g : gaps) out.push_back(&g);
  std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->teacher_id < b->teacher_id; });
  return out;
}

Subject common_subject(std::span<const TeacherGapEstimate> gaps) {
  const Subject s = gaps.front().subject;
  for (const auto& g : gaps)
    if (g.subject != s) throw ValidationError("gap estimates mix subjects; decompose one subject at a time");
  return s;
}

double gap_weight(GapWeighting w, double se) {
  switch (w) {
    case GapWeighting::inverse_variance:
      return 1.0 / (se * se);
    case GapWeighting::inverse_se:
      return 1.0 / se;
    case GapWeighting::none:
      break;
  }
  return 1.0;
}

double scale_of(const VarianceDecomposition& d) {
  if (!(d.sd_weighted > 0))
    throw DegenerateError(fmt::format("bias-corrected SD of {} gaps is zero; outcome cannot be scaled",
                                      to_string(d.subject)));
  return d.sd_weighted;
}

PredictorRegressionResult finish(const Vector& y, const Design& d, const regress::RegressionSpec& spec,
                                 const Factor& cluster, std::string fe, std::string weighting, std::size_t unmatched) {
  PredictorRegressionResult r;
  const auto f = regress::fit(y, d, spec);
  const auto cov = regress::cluster_covariance(f, {cluster});
  r.coefficients = regress::coefficient_table(f, cov);
  r.dropped = f.dropped;
  r.fixed_effects = std::move(fe);
  r.weighting = std::move(weighting);
  r.cluster = cluster.name;
  r.r2 = f.r2;
  r.n = f.n;
  r.clusters = static_cast<std::size_t>(cluster.levels);
  r.unmatched = unmatched;
  r.notices = f.notices;
  r.notices.insert(r.notices.end(), cov.warnings.begin(), cov.warnings.end());
  if (unmatched > 0) r.notices.push_back(fmt::format("{} gap estimates had no matching predictor record", unmatched));
  return r;
}

}  // namespace

VarianceDecomposition variance_decomposition(std::span<const TeacherGapEstimate> gaps) {
  if (gaps.size() < 2) throw ValidationError("variance decomposition needs at least two teachers");
  VarianceDecomposition d;
  d.subject = common_subject(gaps);
  d.n_teachers = gaps.size();
  // sums run in teacher-id order so the result does not depend on input order
  const auto g = sorted_by_id(gaps);
  const double j = static_cast<double>(g.size());
  double total = 0.0;
  d.weights.min = std::numeric_limits<double>::infinity();
  for (auto* e : g) {
    d.mean += e->theta_hat;
    const double nj = e->n_female + e->n_male;
    total += nj;
    d.weights.min = std::min(d.weights.min, nj);
    d.weights.max = std::max(d.weights.max, nj);
  }
  if (!(total > 0)) throw ValidationError("gap estimates carry no student counts");
  d.mean /= j;
  d.weights.students = static_cast<std::size_t>(total);
  d.weights.min /= total;
  d.weights.max /= total;
  double vu = 0.0, vw = 0.0;
  for (auto* e : g) {
    const double dev = (e->theta_hat - d.mean) * (e->theta_hat - d.mean) - e->se * e->se;
    vu += dev;
    vw += (e->n_female + e->n_male) / total * dev;
  }
  vu /= j;
  if (vu < 0) {
    d.flags.push_back(fmt::format("unweighted bias-corrected variance {:.6g} floored at 0", vu));
    vu = 0;
  }
  if (vw < 0) {
    d.flags.push_back(fmt::format("weighted bias-corrected variance {:.6g} floored at 0", vw));
    vw = 0;
  }
  d.var_unweighted = vu;
  d.var_weighted = vw;
  d.sd_unweighted = std::sqrt(vu);
  d.sd_weighted = std::sqrt(vw);
  return d;
}

const regress::Coefficient* PredictorRegressionResult::find(const std::string& name) const {
  for (const auto& c : coefficients)
    if (c.name == name) return &c;
  return nullptr;
}

std::string_view to_string(GapWeighting w) {
  switch (w) {
    case GapWeighting::inverse_variance:
      return "inverse_variance";
    case GapWeighting::inverse_se:
      return "inverse_se";
    case GapWeighting::none:
      break;
  }
  return "none";
}

std::optional<GapWeighting> parse_weighting(std::string_view s) {
  if (s == "inverse_variance") return GapWeighting::inverse_variance;
  if (s == "inverse_se") return GapWeighting::inverse_se;
  if (s == "none") return GapWeighting::none;
  return std::nullopt;
}

PredictorRegressionResult characteristics_regression(std::span<const TeacherGapEstimate> gaps,
                                                     std::span<const TeacherRecord> teachers,
                                                     const VarianceDecomposition& decomposition,
                                                     const CharacteristicsSpec& spec) {
  if (gaps.empty()) throw ValidationError("no gap estimates");
  const Subject subject = common_subject(gaps);
  const double scale = scale_of(decomposition);
  std::map<std::string, const TeacherRecord*> by_id;
  for (const auto& t : teachers)
    if (t.subject == subject) by_id[t.teacher_id] = &t;

  std::vector<std::pair<const TeacherGapEstimate*, const TeacherRecord*>> rows;
  std::size_t unmatched = 0;
  for (auto* g : sorted_by_id(gaps)) {
    auto it = by_id.find(g->teacher_id);
    if (it == by_id.end() || !(g->se > 0)) {
      ++unmatched;
      continue;
    }
    rows.emplace_back(g, it->second);
  }
  if (rows.size() < 2) throw ValidationError("fewer than two gap estimates matched to teacher records");

  const auto n = static_cast<Eigen::Index>(rows.size());
  Vector y(n), w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto* g = rows[static_cast<std::size_t>(i)].first;
    y(i) = g->theta_hat / scale;
    w(i) = gap_weight(spec.weighting, g->se);
  }
  Design d(rows.size());
  auto column = [&](auto value) {
    Vector c(n);
    for (Eigen::Index i = 0; i < n; ++i) c(i) = value(*rows[static_cast<std::size_t>(i)].second);
    return c;
  };
  if (spec.demographics) {
    std::vector<double> ages;
    for (const auto& r : rows) ages.push_back(r.second->age_years);
    std::sort(ages.begin(), ages.end());
    const std::size_t m = ages.size();
    const double median = m % 2 ? ages[m / 2] : 0.5 * (ages[m / 2 - 1] + ages[m / 2]);
    d.add("female", column([](const TeacherRecord& t) { return t.female ? 1.0 : 0.0; }));
    d.add("age_above_median", column([&](const TeacherRecord& t) { return t.age_years > median ? 1.0 : 0.0; }));
    d.add("university", column([](const TeacherRecord& t) { return t.higher_ed_university ? 1.0 : 0.0; }));
  }
  auto bands = [&](const char* prefix, std::string TeacherRecord::*field) {
    for (std::size_t b = 1; b < kExperienceBands.size(); ++b) {
      const std::string band(kExperienceBands[b]);
      d.add(fmt::format("{}_{}", prefix, band), column([&](const TeacherRecord& t) { return t.*field == band ? 1.0 : 0.0; }));
    }
  };
  if (spec.private_experience) bands("private_exp", &TeacherRecord::experience_private_band);
  if (spec.public_experience) bands("public_exp", &TeacherRecord::experience_public_band);
  if (spec.evaluation) {
    d.add("eval_zscore", column([](const TeacherRecord& t) { return t.eval_zscore.value_or(0.0); }));
    d.add("eval_zscore_missing", column([](const TeacherRecord& t) { return t.eval_zscore ? 0.0 : 1.0; }));
    d.add("eval_passed", column([](const TeacherRecord& t) { return t.eval_passed.value_or(false) ? 1.0 : 0.0; }));
    d.add("eval_passed_missing", column([](const TeacherRecord& t) { return t.eval_passed ? 0.0 : 1.0; }));
  }

  std::vector<std::string> schools;
  for (const auto& r : rows) schools.push_back(r.second->school_id);
  const Factor school = Factor::from_keys("school", schools);
  regress::RegressionSpec rs;
  if (spec.school_fixed_effects) rs.fixed_effects = {school};
  rs.weights = w;
  return finish(y, d, rs, school, spec.school_fixed_effects ? "school" : "none", std::string(to_string(spec.weighting)),
                unmatched);
}

PredictorRegressionResult iat_relation_regression(std::span<const TeacherGapEstimate> gaps,
                                                  std::span<const TeacherIatRecord> iat,
                                                  const VarianceDecomposition& decomposition,
                                                  const IatRelationSpec& spec) {
  if (gaps.empty()) throw ValidationError("no gap estimates");
  common_subject(gaps);
  const double scale = scale_of(decomposition);
  std::map<std::string, const TeacherIatRecord*> by_id;
  for (const auto& r : iat) by_id[r.teacher_id] = &r;
  std::vector<std::pair<const TeacherGapEstimate*, const TeacherIatRecord*>> rows;
  std::size_t unmatched = 0;
  for (auto* g : sorted_by_id(gaps)) {
    auto it = by_id.find(g->teacher_id);
    if (it == by_id.end() || (spec.weighting != GapWeighting::none && !(g->se > 0))) {
      ++unmatched;
      continue;
    }
    rows.emplace_back(g, it->second);
  }
  if (rows.size() < 2) throw ValidationError("fewer than two gap estimates matched to IAT records");

  const auto n = static_cast<Eigen::Index>(rows.size());
  Vector y(n), w(n), x(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& [g, r] = rows[static_cast<std::size_t>(i)];
    y(i) = g->theta_hat / scale;
    w(i) = gap_weight(spec.weighting, g->se);
    x(i) = r->iat;
  }
  Design d(rows.size());
  d.add("iat", x);
  if (spec.covariates) {
    std::map<std::string, std::set<std::string>> cat_levels;
    std::set<std::string> numeric;
    for (const auto& [g, r] : rows) {
      for (const auto& [k, v] : r->categorical) cat_levels[k].insert(v);
      for (const auto& [k, v] : r->numeric) numeric.insert(k);
    }
    for (const auto& [k, levels] : cat_levels) {
      for (auto it = std::next(levels.begin()); it != levels.end(); ++it) {
        Vector c(n);
        for (Eigen::Index i = 0; i < n; ++i) {
          const auto& m = rows[static_cast<std::size_t>(i)].second->categorical;
          auto f = m.find(k);
          c(i) = f != m.end() && f->second == *it ? 1.0 : 0.0;
        }
        d.add(fmt::format("{}_{}", k, *it), c);
      }
    }
    for (const auto& k : numeric) {
      Vector c(n), miss(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto& m = rows[static_cast<std::size_t>(i)].second->numeric;
        auto f = m.find(k);
        const bool ok = f != m.end() && !std::isnan(f->second);
        c(i) = ok ? f->second : 0.0;
        miss(i) = ok ? 0.0 : 1.0;
      }
      d.add(k, c);
      if (miss.sum() > 0) d.add(k + "_missing", miss);
    }
  }
  std::vector<std::string> loc;
  for (const auto& [g, r] : rows) loc.push_back(r->school_location);
  const Factor location = Factor::from_keys("school_location", loc);
  regress::RegressionSpec rs;
  rs.fixed_effects = {location};
  rs.weights = w;
  rs.required = {"iat"};
  return finish(y, d, rs, location, "school_location", std::string(to_string(spec.weighting)), unmatched);
}

std::vector<CrossSubjectPair> cross_subject_report(std::span<const TeacherGapEstimate> gaps) {
  std::map<Subject, std::map<std::string, double>> by_subject;
  for (const auto& g : gaps) by_subject[g.subject][g.teacher_id] = g.theta_hat;
  std::vector<CrossSubjectPair> out;
  for (auto a = by_subject.begin(); a != by_subject.end(); ++a) {
    for (auto b = std::next(a); b != by_subject.end(); ++b) {
      std::vector<double> xs, ys;
      for (const auto& [id, x] : a->second) {
        auto it = b->second.find(id);
        if (it == b->second.end()) continue;
        xs.push_back(x);
        ys.push_back(it->second);
      }
      CrossSubjectPair p;
      p.x = a->first;
      p.y = b->first;
      p.teachers = xs.size();
      if (xs.size() < 3) {
        p.slope = p.slope_se = p.intercept = p.correlation = std::numeric_limits<double>::quiet_NaN();
        out.push_back(p);
        continue;
      }
      const double n = static_cast<double>(xs.size());
      double mx = 0, my = 0;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += xs[i] / n;
        my += ys[i] / n;
      }
      double sxx = 0, syy = 0, sxy = 0;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
        sxy += (xs[i] - mx) * (ys[i] - my);
      }
      if (!(sxx > 0) || !(syy > 0)) {
        p.slope = p.slope_se = p.intercept = p.correlation = std::numeric_limits<double>::quiet_NaN();
        out.push_back(p);
        continue;
      }
      p.slope = sxy / sxx;
      p.intercept = my - p.slope * mx;
      p.correlation = sxy / std::sqrt(sxx * syy);
      double meat = 0;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const double e = ys[i] - p.intercept - p.slope * xs[i];
        meat += (xs[i] - mx) * (xs[i] - mx) * e * e;
      }
      p.slope_se = std::sqrt(n / (n - 2.0) * meat) / sxx;
      out.push_back(p);
    }
  }
  return out;
}

}  // namespace gradegap
