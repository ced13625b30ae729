#include "gradegap/synthetic.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "gradegap/error.hpp"
#include "gradegap/parallel.hpp"

namespace gradegap {

Philox4x32::Counter Philox4x32::block(Counter ctr, Key key) {
  constexpr std::uint32_t m0 = 0xD2511F53u, m1 = 0xCD9E8D57u;
  constexpr std::uint32_t w0 = 0x9E3779B9u, w1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += w0;
      key[1] += w1;
    }
    const std::uint64_t p0 = std::uint64_t{m0} * ctr[0];
    const std::uint64_t p1 = std::uint64_t{m1} * ctr[2];
    ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
           static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
  }
  return ctr;
}

RandomStream::RandomStream(std::uint64_t seed, std::uint32_t purpose, std::uint64_t entity)
    : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
      ctr_{0, purpose, static_cast<std::uint32_t>(entity), static_cast<std::uint32_t>(entity >> 32)} {}

RandomStream::result_type RandomStream::operator()() {
  if (used_ == 4) {
    buf_ = Philox4x32::block(ctr_, key_);
    ++ctr_[0];
    used_ = 0;
  }
  return buf_[static_cast<std::size_t>(used_++)];
}

double RandomStream::uniform() {
  const std::uint64_t a = (*this)() >> 5, b = (*this)() >> 6;
  return (static_cast<double>(a * 67108864u + b) + 0.5) / 9007199254740992.0;
}

double RandomStream::normal() {
  if (spare_) {
    const double v = *spare_;
    spare_.reset();
    return v;
  }
  const double r = std::sqrt(-2.0 * std::log(uniform()));
  const double phi = 2.0 * std::numbers::pi * uniform();
  spare_ = r * std::sin(phi);
  return r * std::cos(phi);
}

namespace {

// stream purposes
enum : std::uint32_t { kTeacher = 1, kStudent = 2, kIatTrials = 3, kSchool = 4, kEffStudent = 10, kEffTeacher = 11,
                       kEffSchool = 12 };

void check(bool ok, const std::string& what) {
  if (!ok) throw ValidationError("synthetic config: " + what);
}

double draw_theta(const ThetaPrior& p, RandomStream& rng) {
  switch (p.shape) {
    case PriorShape::point_mass: return p.mean;
    case PriorShape::gaussian: return p.mean + p.sd * rng.normal();
    case PriorShape::mixture: {
      double total = 0.0;
      for (const auto& c : p.components) total += c.weight;
      double u = rng.uniform() * total;
      const double z = rng.normal();
      for (const auto& c : p.components) {
        if (u < c.weight) return c.mean + c.sd * z;
        u -= c.weight;
      }
      return p.components.back().mean + p.components.back().sd * z;
    }
  }
  return p.mean;
}

}  // namespace

std::string_view to_string(PriorShape s) {
  switch (s) {
    case PriorShape::gaussian: return "gaussian";
    case PriorShape::mixture: return "mixture";
    case PriorShape::point_mass: return "point_mass";
  }
  return "?";
}

double ThetaPrior::population_mean() const {
  if (shape != PriorShape::mixture) return mean;
  double w = 0.0, m = 0.0;
  for (const auto& c : components) {
    w += c.weight;
    m += c.weight * c.mean;
  }
  return m / w;
}

double ThetaPrior::population_variance() const {
  if (shape == PriorShape::point_mass) return 0.0;
  if (shape == PriorShape::gaussian) return sd * sd;
  const double mu = population_mean();
  double w = 0.0, v = 0.0;
  for (const auto& c : components) {
    w += c.weight;
    v += c.weight * (c.sd * c.sd + (c.mean - mu) * (c.mean - mu));
  }
  return v / w;
}

void DgpConfig::validate() const {
  check(seed.has_value(), "seed is mandatory");
  check(teachers >= 1 && students_per_teacher >= 1, "need at least one teacher and one student per teacher");
  check(teachers_per_school >= 1 && schools_per_location >= 1, "school structure sizes must be positive");
  check(!years.empty(), "years must not be empty");
  check(exam_grade >= 7 && exam_grade <= 11, "exam_grade must lie in 7..11");
  check(female_share >= 0 && female_share <= 1, "female_share must lie in [0, 1]");
  for (double sd : {prior.sd, ability_sd, lag_noise_sd, va_sd, blind_noise_sd, teacher_noise_sd,
                    outcome.log_earnings_sd, iat.teacher_sd, iat.school_sd})
    check(sd >= 0 && std::isfinite(sd), "standard deviations must be finite and non-negative");
  for (double r : {va_gender_corr, va_theta_corr, error_corr})
    check(r >= -1 && r <= 1, "correlations must lie in [-1, 1]");
  check(outcome.on_time_share >= 0 && outcome.on_time_share <= 1, "on_time_share must lie in [0, 1]");
  check(outcome.labor_years >= 0, "labor_years must be non-negative");
  check(iat.trials_per_block >= 1, "iat trials_per_block must be positive");
  if (prior.shape == PriorShape::mixture) {
    check(!prior.components.empty(), "mixture prior needs components");
    double w = 0.0;
    for (const auto& c : prior.components) {
      check(c.weight >= 0 && c.sd >= 0, "mixture weights and sds must be non-negative");
      w += c.weight;
    }
    check(w > 0, "mixture weights must sum to a positive value");
  }
}

DgpConfig DgpConfig::from_json(const nlohmann::json& doc) {
  DgpConfig c;
  try {
    if (doc.contains("seed")) c.seed = doc.at("seed").get<std::uint64_t>();
    c.teachers = doc.value("teachers", c.teachers);
    c.students_per_teacher = doc.value("students_per_teacher", c.students_per_teacher);
    c.teachers_per_school = doc.value("teachers_per_school", c.teachers_per_school);
    c.schools_per_location = doc.value("schools_per_location", c.schools_per_location);
    if (doc.contains("subject")) {
      auto s = parse_subject(doc.at("subject").get<std::string>());
      check(s.has_value(), "unknown subject");
      c.subject = *s;
    }
    c.years = doc.value("years", c.years);
    c.exam_grade = doc.value("exam_grade", c.exam_grade);
    c.female_share = doc.value("female_share", c.female_share);
    if (doc.contains("prior")) {
      const auto& p = doc.at("prior");
      const std::string shape = p.value("shape", std::string("gaussian"));
      if (shape == "gaussian") c.prior.shape = PriorShape::gaussian;
      else if (shape == "mixture") c.prior.shape = PriorShape::mixture;
      else if (shape == "point_mass") c.prior.shape = PriorShape::point_mass;
      else check(false, "unknown prior shape '" + shape + "'");
      c.prior.mean = p.value("mean", c.prior.mean);
      c.prior.sd = p.value("sd", c.prior.sd);
      if (p.contains("components"))
        for (const auto& m : p.at("components"))
          c.prior.components.push_back({m.value("weight", 1.0), m.value("mean", 0.0), m.value("sd", 0.0)});
    }
    c.ability_sd = doc.value("ability_sd", c.ability_sd);
    c.female_effect = doc.value("female_effect", c.female_effect);
    c.lag_noise_sd = doc.value("lag_noise_sd", c.lag_noise_sd);
    c.lag_effect = doc.value("lag_effect", c.lag_effect);
    c.va_sd = doc.value("va_sd", c.va_sd);
    c.va_gender_corr = doc.value("va_gender_corr", c.va_gender_corr);
    c.va_theta_corr = doc.value("va_theta_corr", c.va_theta_corr);
    c.blind_noise_sd = doc.value("blind_noise_sd", c.blind_noise_sd);
    c.teacher_noise_sd = doc.value("teacher_noise_sd", c.teacher_noise_sd);
    if (doc.contains("noise_sd")) c.blind_noise_sd = c.teacher_noise_sd = doc.at("noise_sd").get<double>();
    c.error_corr = doc.value("error_corr", c.error_corr);
    c.raw_points = doc.value("raw_points", c.raw_points);
    if (doc.contains("outcome")) {
      const auto& o = doc.at("outcome");
      auto& t = c.outcome;
      t.d0 = o.value("d0", t.d0);
      t.d1 = o.value("d1", t.d1);
      t.d2 = o.value("d2", t.d2);
      t.d3 = o.value("d3", t.d3);
      t.d_lag = o.value("d_lag", t.d_lag);
      t.on_time_share = o.value("on_time_share", t.on_time_share);
      t.e0 = o.value("e0", t.e0);
      t.e1 = o.value("e1", t.e1);
      t.e2 = o.value("e2", t.e2);
      t.e3 = o.value("e3", t.e3);
      t.labor_years = o.value("labor_years", t.labor_years);
      t.log_earnings_mean = o.value("log_earnings_mean", t.log_earnings_mean);
      t.log_earnings_sd = o.value("log_earnings_sd", t.log_earnings_sd);
      t.confounded = o.value("confounded", t.confounded);
      t.confounding = o.value("confounding", t.confounding);
    }
    if (doc.contains("iat")) {
      const auto& o = doc.at("iat");
      auto& t = c.iat;
      t.enabled = o.value("enabled", t.enabled);
      t.teacher_mean = o.value("teacher_mean", t.teacher_mean);
      t.teacher_sd = o.value("teacher_sd", t.teacher_sd);
      t.theta_loading = o.value("theta_loading", t.theta_loading);
      t.trials_per_block = o.value("trials_per_block", t.trials_per_block);
      t.n1 = o.value("n1", t.n1);
      t.n2 = o.value("n2", t.n2);
      t.n3 = o.value("n3", t.n3);
      t.school_sd = o.value("school_sd", t.school_sd);
      t.student_mean = o.value("student_mean", t.student_mean);
      t.student_scale = o.value("student_scale", t.student_scale);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("synthetic config: {}", e.what()));
  }
  return c;
}

nlohmann::json DgpConfig::to_json() const {
  nlohmann::json j;
  if (seed) j["seed"] = *seed;
  j["teachers"] = teachers;
  j["students_per_teacher"] = students_per_teacher;
  j["teachers_per_school"] = teachers_per_school;
  j["schools_per_location"] = schools_per_location;
  j["subject"] = std::string(to_string(subject));
  j["years"] = years;
  j["exam_grade"] = exam_grade;
  j["female_share"] = female_share;
  nlohmann::json p{{"shape", std::string(to_string(prior.shape))}, {"mean", prior.mean}, {"sd", prior.sd}};
  p["components"] = nlohmann::json::array();
  for (const auto& c : prior.components) p["components"].push_back({{"weight", c.weight}, {"mean", c.mean}, {"sd", c.sd}});
  j["prior"] = p;
  j["ability_sd"] = ability_sd;
  j["female_effect"] = female_effect;
  j["lag_noise_sd"] = lag_noise_sd;
  j["lag_effect"] = lag_effect;
  j["va_sd"] = va_sd;
  j["va_gender_corr"] = va_gender_corr;
  j["va_theta_corr"] = va_theta_corr;
  j["blind_noise_sd"] = blind_noise_sd;
  j["teacher_noise_sd"] = teacher_noise_sd;
  j["error_corr"] = error_corr;
  j["raw_points"] = raw_points;
  const auto& o = outcome;
  j["outcome"] = {{"d0", o.d0}, {"d1", o.d1}, {"d2", o.d2}, {"d3", o.d3}, {"d_lag", o.d_lag},
                  {"on_time_share", o.on_time_share}, {"e0", o.e0}, {"e1", o.e1}, {"e2", o.e2}, {"e3", o.e3},
                  {"labor_years", o.labor_years}, {"log_earnings_mean", o.log_earnings_mean},
                  {"log_earnings_sd", o.log_earnings_sd}, {"confounded", o.confounded},
                  {"confounding", o.confounding}};
  j["iat"] = {{"enabled", iat.enabled}, {"teacher_mean", iat.teacher_mean}, {"teacher_sd", iat.teacher_sd},
              {"theta_loading", iat.theta_loading}, {"trials_per_block", iat.trials_per_block}, {"n1", iat.n1},
              {"n2", iat.n2}, {"n3", iat.n3}, {"school_sd", iat.school_sd},
              {"student_mean", iat.student_mean}, {"student_scale", iat.student_scale}};
  return j;
}

nlohmann::json GroundTruth::to_json(const DgpConfig& config) const {
  nlohmann::json j;
  j["rng"] = kRngName;
  j["seed"] = seed;
  j["theta"] = theta;
  j["theta_std"] = theta_std;
  j["teacher_iat"] = teacher_iat;
  j["prior"] = {{"shape", std::string(to_string(config.prior.shape))}, {"mean", prior_mean},
                {"variance", prior_variance}};
  j["sample"] = {{"mean", sample_mean}, {"variance", sample_variance}};
  const auto& o = config.outcome;
  j["coefficients"] = {{"grad_ever", {{"d0", o.d0}, {"d1", o.d1}, {"d2", o.d2}, {"d3", o.d3}, {"d_lag", o.d_lag}}},
                       {"employed_formal", {{"e0", o.e0}, {"e1", o.e1}, {"e2", o.e2}, {"e3", o.e3}}},
                       {"student_iat", {{"n1", config.iat.n1}, {"n2", config.iat.n2}, {"n3", config.iat.n3}}}};
  nlohmann::json corr = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) corr.push_back({va_correlation(r, 0), va_correlation(r, 1), va_correlation(r, 2)});
  j["va_correlation"] = {{"labels", {"theta", "va_female", "va_male"}}, {"matrix", corr}};
  return j;
}

double IatLatencyModel::base_sd() const {
  const double s2 = log_sd * log_sd;
  return std::exp(log_mean + 0.5 * s2) * std::sqrt(std::expm1(s2));
}

std::vector<IatTrial> generate_iat(const std::string& respondent, double target, const IatLatencyModel& model,
                                   RandomStream& rng) {
  if (!(std::abs(target) < 2.0)) throw ValidationError(fmt::format("IAT target D {} is infeasible", target));
  // equal-size blocks: D = offset / sqrt(sd^2 + offset^2 / 4)
  const double offset = std::abs(target) * model.base_sd() / std::sqrt(1.0 - target * target / 4.0);
  std::vector<IatTrial> out;
  long long k = 0;
  for (IatBlock b : {IatBlock::practice_compatible, IatBlock::practice_incompatible, IatBlock::test_compatible,
                     IatBlock::test_incompatible}) {
    const bool incompatible = b == IatBlock::practice_incompatible || b == IatBlock::test_incompatible;
    const bool slowed = target >= 0 ? incompatible : !incompatible;
    for (int i = 0; i < model.trials_per_block; ++i) {
      IatTrial t;
      t.respondent_id = respondent;
      t.block = b;
      t.trial_index = k++;
      t.latency_ms = model.shift_ms + std::exp(model.log_mean + model.log_sd * rng.normal()) + (slowed ? offset : 0.0);
      t.correct = !(model.error_rate > 0 && rng.uniform() < model.error_rate);
      out.push_back(std::move(t));
    }
  }
  return out;
}

SyntheticData generate(const DgpConfig& config) {
  config.validate();
  const std::uint64_t seed = *config.seed;
  const std::size_t J = config.teachers, S = config.students_per_teacher;
  const double prior_mean = config.prior.population_mean();
  const double prior_sd = std::sqrt(config.prior.population_variance());

  struct TeacherDraw {
    double theta = 0, theta_std = 0, va_f = 0, va_m = 0, iat = 0;
    TeacherRecord record;
    std::vector<IatTrial> trials;
  };
  std::vector<TeacherDraw> tdraw(J);
  const std::size_t schools = (J + config.teachers_per_school - 1) / config.teachers_per_school;
  std::vector<double> school_iat_effect(schools);
  for (std::size_t s = 0; s < schools; ++s) {
    RandomStream rng(seed, kSchool, s);
    school_iat_effect[s] = config.iat.school_sd * rng.normal();
  }

  const IatLatencyModel latency{.trials_per_block = config.iat.trials_per_block};
  parallel_for(J, [&](std::size_t j) {
    RandomStream rng(seed, kTeacher, j);
    TeacherDraw& t = tdraw[j];
    t.theta = draw_theta(config.prior, rng);
    t.theta_std = prior_sd > 0 ? (t.theta - prior_mean) / prior_sd : 0.0;
    const double a = config.va_theta_corr, b = std::sqrt(1.0 - a * a);
    const double r = config.va_gender_corr;
    const double z1 = rng.normal(), z2 = rng.normal();
    t.va_f = config.va_sd * (a * t.theta_std + b * z1);
    t.va_m = config.va_sd * (a * t.theta_std + b * (r * z1 + std::sqrt(1.0 - r * r) * z2));

    auto& rec = t.record;
    const std::size_t school = j / config.teachers_per_school;
    rec.teacher_id = fmt::format("t{:05d}", j);
    rec.subject = config.subject;
    rec.female = rng.bernoulli(0.6);
    rec.age_years = 25 + static_cast<int>(rng.uniform() * 35.0);
    const double c = rng.uniform();
    rec.contract_type = c < 0.5 ? ContractType::tenured : c < 0.9 ? ContractType::fixed_term : ContractType::other;
    rec.experience_public_band = std::string(kExperienceBands[static_cast<std::size_t>(rng.uniform() * 5.0)]);
    rec.experience_private_band = std::string(kExperienceBands[static_cast<std::size_t>(rng.uniform() * 5.0)]);
    rec.higher_ed_university = rng.bernoulli(0.4);
    const double ez = rng.normal();
    if (rng.bernoulli(0.8)) {
      rec.eval_zscore = ez;
      rec.eval_passed = ez > -0.5;
    }
    rec.school_id = fmt::format("sch{:04d}", school);
    rec.school_location = fmt::format("loc{:03d}", school / config.schools_per_location);

    if (config.iat.enabled) {
      const double d = config.iat.teacher_mean + config.iat.teacher_sd * rng.normal() +
                       config.iat.theta_loading * t.theta_std;
      t.iat = std::clamp(d, -1.9, 1.9);
      RandomStream trials(seed, kIatTrials, j);
      t.trials = generate_iat(rec.teacher_id, t.iat, latency, trials);
    }
  });

  double iat_mean = 0.0, iat_sd = 0.0;
  if (config.iat.enabled) {
    for (const auto& t : tdraw) iat_mean += t.iat;
    iat_mean /= static_cast<double>(J);
    for (const auto& t : tdraw) iat_sd += (t.iat - iat_mean) * (t.iat - iat_mean);
    iat_sd = std::sqrt(iat_sd / static_cast<double>(J));
  }
  const auto& nu = config.iat;
  const double systematic = 0.5 * nu.n1 * nu.n1 + nu.n1 * nu.n3 + nu.n3 * nu.n3 + 0.25 * nu.n2 * nu.n2 +
                            nu.school_sd * nu.school_sd;
  const double iat_noise_sd = std::sqrt(std::max(1.0 - systematic, 0.01));

  struct StudentDraw {
    StudentRecord record;
    ScoreObservation score;
    std::vector<EducationEvent> events;
    std::vector<EmploymentMonth> months;
    std::optional<StudentIat> iat;
  };
  std::vector<StudentDraw> sdraw(J * S);
  const double scale = config.raw_points ? 3.0 : 1.0, shift = config.raw_points ? 11.0 : 0.0;
  const auto& oc = config.outcome;
  parallel_for(J * S, [&](std::size_t idx) {
    const std::size_t j = idx / S, k = idx % S;
    const TeacherDraw& t = tdraw[j];
    RandomStream rng(seed, kStudent, (std::uint64_t{j} << 24) | k);
    StudentDraw& d = sdraw[idx];
    const int year = config.years[k % config.years.size()];
    auto& st = d.record;
    st.student_id = fmt::format("s{:05d}_{:04d}", j, k);
    st.female = rng.bernoulli(config.female_share);
    st.age_months = 12 * (config.exam_grade + 5) + static_cast<int>(std::lround(6.0 * rng.normal()));
    st.birthplace_code = fmt::format("bp{}", static_cast<int>(rng.uniform() * 5.0));
    st.language_code = rng.bernoulli(0.85) ? "es" : "qu";
    if (rng.bernoulli(0.9)) st.mother_education = fmt::format("me{}", static_cast<int>(rng.uniform() * 4.0));
    if (rng.bernoulli(0.95)) st.cct_flag = rng.bernoulli(0.3);
    st.school_id = t.record.school_id;
    st.classroom_id = fmt::format("c{}_{}", t.record.teacher_id, year);
    st.grade = config.exam_grade;
    st.school_year = year;
    st.cohort_projected_grad = year + (11 - config.exam_grade);

    const double ability = config.ability_sd * rng.normal();
    const double lag_math = ability + config.lag_noise_sd * rng.normal();
    const double lag_lang = ability + config.lag_noise_sd * rng.normal();
    const double lag_pe = 0.2 * ability + config.lag_noise_sd * rng.normal();
    const double male = st.female ? 0.0 : 1.0;
    // scores load on ability only through the observed lags, which keeps the
    // two equations' residuals independent unless error_corr says otherwise
    const double structural = config.female_effect * (st.female ? 1.0 : 0.0) + config.lag_effect * lag_math +
                              0.2 * lag_lang + (st.female ? t.va_f : t.va_m);
    const double e1 = rng.normal(), e2 = rng.normal();
    const double eta = config.blind_noise_sd * e1;
    const double eta_t = config.teacher_noise_sd * (config.error_corr * e1 +
                                                     std::sqrt(1.0 - config.error_corr * config.error_corr) * e2);
    auto& sc = d.score;
    sc.student_id = st.student_id;
    sc.teacher_id = t.record.teacher_id;
    sc.subject = config.subject;
    sc.school_year = year;
    sc.blind_score = shift + scale * (structural + eta);
    sc.teacher_score = shift + scale * (structural + t.theta * male + eta_t);
    sc.lagged_math = shift + scale * lag_math;
    sc.lagged_language = shift + scale * lag_lang;
    sc.lagged_physed = shift + scale * lag_pe;
    sc.standardized = !config.raw_points;

    // outcomes
    const double f = st.female ? 1.0 : 0.0;
    double hidden = 0.0;
    if (oc.confounded) hidden = oc.confounding * (0.5 * t.theta_std + rng.normal());
    const double p_grad = std::clamp(oc.d0 + oc.d1 * t.theta_std * f + oc.d2 * f + oc.d3 * t.theta_std +
                                         oc.d_lag * lag_math + hidden, 0.0, 1.0);
    const int cohort = st.cohort_projected_grad;
    if (rng.uniform() < p_grad) {
      const bool on_time = rng.uniform() < oc.on_time_share;
      d.events.push_back({st.student_id, EducationEventKind::graduated, on_time ? cohort : cohort + 1});
    }
    const double p_emp = std::clamp(oc.e0 + oc.e1 * t.theta_std * f + oc.e2 * f + oc.e3 * t.theta_std + hidden,
                                    0.0, 1.0);
    for (int y = 1; y <= oc.labor_years; ++y) {
      const bool employed = rng.uniform() < p_emp;
      const double log_pay = oc.log_earnings_mean + oc.log_earnings_sd * rng.normal();
      if (!employed) continue;
      for (int m = 1; m <= 12; ++m)
        d.months.push_back({st.student_id, fmt::format("e{}", t.record.school_id), cohort + y, m, std::exp(log_pay),
                            160.0, true});
    }
    if (config.iat.enabled) {
      const double T = iat_sd > 0 ? (t.iat - iat_mean) / iat_sd : 0.0;
      const double v = nu.n1 * T * f + nu.n2 * f + nu.n3 * T + school_iat_effect[j / config.teachers_per_school] +
                       iat_noise_sd * rng.normal();
      d.iat = StudentIat{st.student_id, year, std::clamp(nu.student_mean + nu.student_scale * v, -2.0, 2.0)};
    }
  });

  SyntheticData out;
  auto& truth = out.truth;
  truth.seed = seed;
  truth.prior_mean = prior_mean;
  truth.prior_variance = config.prior.population_variance();
  Eigen::MatrixXd tv(static_cast<Eigen::Index>(J), 3);
  for (std::size_t j = 0; j < J; ++j) {
    const auto& t = tdraw[j];
    truth.theta[t.record.teacher_id] = t.theta;
    truth.theta_std[t.record.teacher_id] = t.theta_std;
    if (config.iat.enabled) truth.teacher_iat[t.record.teacher_id] = t.iat;
    tv.row(static_cast<Eigen::Index>(j)) << t.theta, t.va_f, t.va_m;
    out.panel.teachers.push_back(t.record);
    out.iat_trials.insert(out.iat_trials.end(), t.trials.begin(), t.trials.end());
  }
  const Eigen::RowVector3d mean = tv.colwise().mean();
  const Eigen::MatrixXd centered = tv.rowwise() - mean;
  const Eigen::Matrix3d cov = centered.transpose() * centered / static_cast<double>(J);
  truth.sample_mean = mean(0);
  truth.sample_variance = cov(0, 0);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      const double den = std::sqrt(cov(r, r) * cov(c, c));
      truth.va_correlation(r, c) = den > 0 ? cov(r, c) / den : (r == c ? 1.0 : 0.0);
    }
  for (auto& d : sdraw) {
    out.panel.students.push_back(std::move(d.record));
    out.panel.scores.push_back(d.score);
    out.panel.events.insert(out.panel.events.end(), d.events.begin(), d.events.end());
    out.panel.employment.insert(out.panel.employment.end(), d.months.begin(), d.months.end());
    if (d.iat) out.panel.student_iat.push_back(*d.iat);
  }
  return out;
}

void write_synthetic(const std::filesystem::path& dir, const SyntheticData& data, const DgpConfig& config) {
  write_panel(dir, data.panel);
  if (!data.iat_trials.empty()) write_trials(dir / "iat_trials.csv", data.iat_trials);
  auto dump = [&](const std::filesystem::path& p, const nlohmann::json& j) {
    std::ofstream f(p);
    if (!f) throw ValidationError(fmt::format("cannot write {}", p.string()));
    f << j.dump(2) << '\n';
  };
  dump(dir / "truth.json", data.truth.to_json(config));
  dump(dir / "config.json", config.to_json());
}

EffectsSample generate_effects_sample(const EffectsDgp& c) {
  if (!c.seed) throw ValidationError("effects sample: seed is mandatory");
  if (c.students == 0 || c.schools == 0 || c.grades.empty() || c.cohorts.empty() || c.teachers_per_school_grade == 0)
    throw ValidationError("effects sample: sizes must be positive");
  const std::uint64_t seed = *c.seed;
  const std::size_t G = c.grades.size(), T = c.teachers_per_school_grade;
  std::vector<double> school_effect(c.schools);
  for (std::size_t s = 0; s < c.schools; ++s) {
    RandomStream rng(seed, kEffSchool, s);
    school_effect[s] = c.school_sd * rng.normal();
  }
  std::vector<double> teacher_theta(c.schools * G * T);
  for (std::size_t t = 0; t < teacher_theta.size(); ++t) {
    RandomStream rng(seed, kEffTeacher, t);
    teacher_theta[t] = rng.normal();
  }
  std::vector<std::vector<ExposureRow>> rows(c.students);
  std::vector<std::vector<double>> ys(c.students);
  parallel_for(c.students, [&](std::size_t i) {
    RandomStream rng(seed, kEffStudent, i);
    const std::size_t school = std::min(c.schools - 1, static_cast<std::size_t>(rng.uniform() * c.schools));
    const bool female = rng.bernoulli(0.5);
    const int cohort = c.cohorts[i % c.cohorts.size()];
    const double student = c.student_sd * rng.normal();
    const double x = rng.normal();
    const double f = female ? 1.0 : 0.0;
    for (std::size_t g = 0; g < G; ++g) {
      const std::size_t slot = std::min(T - 1, static_cast<std::size_t>(rng.uniform() * T));
      const std::size_t teacher = (school * G + g) * T + slot;
      const double th = teacher_theta[teacher];
      ExposureRow r;
      r.student_id = fmt::format("s{:07d}", i);
      r.grade = c.grades[g];
      r.school_year = cohort - (11 - r.grade);
      r.teacher_id = fmt::format("t{:06d}", teacher);
      r.treatment = th;
      r.female = female;
      r.cohort = cohort;
      r.school_id = fmt::format("sch{:04d}", school);
      r.school_location = fmt::format("loc{:03d}", school / 10);
      r.covariates = {x};
      const double index = c.d0 + c.d1 * th * f + c.d2 * f + c.d3 * th + c.d_x * x + student + school_effect[school];
      const double u = rng.uniform(), z = rng.normal();
      ys[i].push_back(c.binary ? (u < std::clamp(index, 0.0, 1.0) ? 1.0 : 0.0) : index + c.noise_sd * z);
      rows[i].push_back(std::move(r));
    }
  });
  EffectsSample out;
  out.covariate_names = {"x"};
  for (std::size_t i = 0; i < c.students; ++i) {
    out.rows.insert(out.rows.end(), rows[i].begin(), rows[i].end());
    out.outcome.insert(out.outcome.end(), ys[i].begin(), ys[i].end());
  }
  out.truth = {{"d0", c.d0}, {"d1", c.d1}, {"d2", c.d2}, {"d3", c.d3}, {"x", c.d_x}};
  return out;
}

}  // namespace gradegap
