#include "gradegap/cli.hpp"

#include <fmt/format.h>
#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "gradegap/eb.hpp"
#include "gradegap/effects.hpp"
#include "gradegap/error.hpp"
#include "gradegap/gaps.hpp"
#include "gradegap/heterogeneity.hpp"
#include "gradegap/iat.hpp"
#include "gradegap/parallel.hpp"
#include "gradegap/synthetic.hpp"
#include "gradegap/table.hpp"

namespace gradegap::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  RunConfig cfg;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;  // relative to cfg.out
  std::ostream* log = nullptr;

  fs::path output(const std::string& name) {
    outputs.emplace_back(name);
    return cfg.out / name;
  }
  void input(const fs::path& p) {
    if (fs::exists(p) && fs::is_regular_file(p)) inputs.push_back(p);
  }
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError(fmt::format("cannot write {}", path.string()));
  f << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError(fmt::format("cannot read {}", path.string()));
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

void require_dir(const fs::path& p, const char* flag) {
  if (p.empty()) throw ValidationError(fmt::format("{} is required", flag));
  if (!fs::exists(p)) throw ValidationError(fmt::format("{} path '{}' does not exist", flag, p.string()));
}

void prepare_out(const fs::path& out) {
  if (out.empty()) throw ValidationError("--out is required");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw ValidationError(fmt::format("cannot create output directory '{}'", out.string()));
}

Subject subject_of(const RunConfig& c) {
  auto s = parse_subject(c.subject);
  if (!s) throw ValidationError(fmt::format("unknown subject '{}'", c.subject));
  return *s;
}

// file argument or a directory holding the default file name
fs::path in_file(const fs::path& in, const char* name) {
  return fs::is_directory(in) ? in / name : in;
}

PanelSchema schema_of(Run& r) {
  if (r.cfg.schema.empty()) return PanelSchema::defaults();
  r.input(r.cfg.schema);
  return PanelSchema::load(r.cfg.schema);
}

Panel load_inputs(Run& r, const PanelSchema& schema) {
  require_dir(r.cfg.in, "--in");
  for (const auto& [name, t] : schema.tables) r.input(r.cfg.in / t.file);
  Panel p = load_panel(r.cfg.in, schema);
  const bool raw = std::any_of(p.scores.begin(), p.scores.end(), [](const auto& o) { return !o.standardized; });
  if (raw) p.scores = standardize_scores(std::move(p.scores));
  return p;
}

GapCovariates covariates_of(const json& o) {
  GapCovariates c;
  if (o.contains("covariates")) {
    const auto& j = o.at("covariates");
    c.lags = j.value("lags", c.lags);
    c.age_months = j.value("age_months", c.age_months);
    c.birthplace = j.value("birthplace", c.birthplace);
    c.blind_exclude = j.value("blind_exclude", c.blind_exclude);
  }
  return c;
}

GapCovarianceMode covariance_mode(const json& o) {
  const std::string m = o.value("gap_covariance", std::string("independent"));
  if (m == "independent") return GapCovarianceMode::independent;
  if (m == "joint") return GapCovarianceMode::joint;
  throw ValidationError(fmt::format("unknown gap_covariance '{}'", m));
}

json decomposition_json(const VarianceDecomposition& d) {
  return {{"subject", std::string(to_string(d.subject))}, {"mean", d.mean}, {"var_unweighted", d.var_unweighted},
          {"var_weighted", d.var_weighted}, {"sd_unweighted", d.sd_unweighted}, {"sd_weighted", d.sd_weighted},
          {"teachers", d.n_teachers}, {"students", d.weights.students}, {"weight_min", d.weights.min},
          {"weight_max", d.weights.max}, {"flags", d.flags}};
}

void write_coefficients(const fs::path& path, const PredictorRegressionResult& r) {
  Table t;
  t.header = {"term", "estimate", "se", "t", "p", "n", "clusters", "fixed_effects", "weighting", "cluster"};
  for (const auto& c : r.coefficients)
    t.rows.push_back({c.name, format_double(c.estimate), format_double(c.se), format_double(c.t), format_double(c.p),
                      std::to_string(r.n), std::to_string(r.clusters), r.fixed_effects, r.weighting, r.cluster});
  write_table(path, t);
}

std::vector<TeacherGapEstimate> gaps_for(const std::vector<TeacherGapEstimate>& all, const RunConfig& c, bool filter) {
  if (!filter) return all;
  const Subject s = subject_of(c);
  std::vector<TeacherGapEstimate> out;
  for (const auto& g : all)
    if (g.subject == s) out.push_back(g);
  if (out.empty()) throw ValidationError(fmt::format("no gap estimates for subject {}", c.subject));
  return out;
}

std::map<std::string, double> load_iat_scores(Run& r) {
  r.input(r.cfg.iat);
  const Table t = read_table(r.cfg.iat);
  const std::size_t id = t.require_column("respondent_id"), z = t.require_column("iat_std");
  std::map<std::string, double> out;
  for (const auto& row : t.rows)
    if (auto v = parse_double(row[z])) out[row[id]] = *v;
  return out;
}

// ---- subcommands ----

void cmd_simulate(Run& r) {
  DgpConfig c;
  if (!r.cfg.config.empty()) c = DgpConfig::from_json(r.cfg.options);
  if (r.cfg.seed) c.seed = r.cfg.seed;
  prepare_out(r.cfg.out);
  const SyntheticData d = generate(c);
  write_synthetic(r.cfg.out, d, c);
  for (const auto& e : fs::directory_iterator(r.cfg.out))
    if (e.is_regular_file() && e.path().filename() != "manifest.json") r.outputs.push_back(e.path().filename());
  std::sort(r.outputs.begin(), r.outputs.end());
}

void cmd_gaps(Run& r) {
  const PanelSchema schema = schema_of(r);
  const Panel p = load_inputs(r, schema);
  prepare_out(r.cfg.out);
  const Subject subject = subject_of(r.cfg);
  const StudentIndex index(p.students);
  const GapCovariates cov = covariates_of(r.cfg.options);
  const SystemFit fit = estimate_system(p.scores, index, subject, cov);
  const std::size_t min_cell = r.cfg.options.value("min_cell", std::size_t{2});
  const GapResult g = teacher_gaps(fit, min_cell, covariance_mode(r.cfg.options));
  write_gaps(r.output("gaps.csv"), g.gaps);
  write_rejects(r.output("rejects.csv"), p.rejects);
  json summary = {{"subject", std::string(to_string(subject))}, {"teachers", g.gaps.size()},
                  {"omitted_min_cell", g.omitted_min_cell}, {"single_gender", fit.single_gender},
                  {"rows_without_student", fit.rows_without_student}, {"warnings", g.warnings},
                  {"notices", fit.notices}, {"rejects", p.rejects.size()}};
  if (r.cfg.options.value("va_correlation", false)) {
    const SureFit sure = sure_fit(p.scores, index, subject, cov);
    const auto va = teacher_va(sure, min_cell);
    const auto rep = va_correlation_report(va, subject);
    json m = json::array();
    for (int i = 0; i < 3; ++i) m.push_back({rep.correlation(i, 0), rep.correlation(i, 1), rep.correlation(i, 2)});
    write_json(r.output("va_correlation.json"),
               {{"labels", rep.labels}, {"correlation", m}, {"teachers", rep.teachers}, {"flags", rep.flags},
                {"residual_corr", sure.residual_corr}});
  }
  write_json(r.output("gaps_summary.json"), summary);
}

void cmd_hetero(Run& r) {
  require_dir(r.cfg.in, "--in");
  const fs::path gp = in_file(r.cfg.in, "gaps.csv");
  r.input(gp);
  const auto all = load_gaps(gp);
  prepare_out(r.cfg.out);
  const auto gaps = gaps_for(all, r.cfg, true);
  const VarianceDecomposition d = variance_decomposition(gaps);
  json out = decomposition_json(d);
  const auto cross = cross_subject_report(all);
  if (!cross.empty()) {
    Table t;
    t.header = {"x", "y", "teachers", "slope", "slope_se", "intercept", "correlation"};
    for (const auto& c : cross)
      t.rows.push_back({std::string(to_string(c.x)), std::string(to_string(c.y)), std::to_string(c.teachers),
                        format_double(c.slope), format_double(c.slope_se), format_double(c.intercept),
                        format_double(c.correlation)});
    write_table(r.output("cross_subject.csv"), t);
  }
  if (!r.cfg.panel.empty()) {
    require_dir(r.cfg.panel, "--panel");
    const PanelSchema schema = schema_of(r);
    const fs::path tp = r.cfg.panel / schema.table("teachers").file;
    r.input(tp);
    std::vector<Reject> rejects;
    const auto teachers = load_teachers(tp, schema.table("teachers"), schema.delimiter, rejects);
    CharacteristicsSpec spec;
    const auto& o = r.cfg.options;
    if (o.contains("weighting")) {
      auto w = parse_weighting(o.at("weighting").get<std::string>());
      if (!w) throw ValidationError("unknown weighting");
      spec.weighting = *w;
    }
    spec.private_experience = o.value("private_experience", spec.private_experience);
    spec.public_experience = o.value("public_experience", spec.public_experience);
    spec.evaluation = o.value("evaluation", spec.evaluation);
    const auto reg = characteristics_regression(gaps, teachers, d, spec);
    write_coefficients(r.output("characteristics.csv"), reg);
    out["characteristics_notices"] = reg.notices;
    if (!r.cfg.iat.empty()) {
      const auto z = load_iat_scores(r);
      std::map<std::string, const TeacherRecord*> by_id;
      for (const auto& t : teachers) by_id.emplace(t.teacher_id, &t);
      std::vector<TeacherIatRecord> recs;
      for (const auto& [id, v] : z) {
        auto it = by_id.find(id);
        if (it == by_id.end()) continue;
        recs.push_back({id, v, it->second->school_location, {}, {}});
      }
      const auto rel = iat_relation_regression(gaps, recs, d);
      write_coefficients(r.output("iat_relation.csv"), rel);
    }
  }
  write_json(r.output("hetero.json"), out);
}

void cmd_eb(Run& r) {
  require_dir(r.cfg.in, "--in");
  const fs::path gp = in_file(r.cfg.in, "gaps.csv");
  r.input(gp);
  const auto all = load_gaps(gp);
  prepare_out(r.cfg.out);
  const auto gaps = gaps_for(all, r.cfg, r.cfg.options.contains("subject") || !r.cfg.subject.empty());
  const VarianceDecomposition d = variance_decomposition(gaps);
  json prior = {{"method", r.cfg.method}, {"decomposition", decomposition_json(d)}};
  if (r.cfg.method == "gaussian") {
    const GaussianPrior g = fit_gaussian_prior(d);
    write_posteriors(r.output("posteriors.csv"), shrink(gaps, g));
    prior["mu"] = g.mu;
    prior["phi2"] = g.phi2;
  } else if (r.cfg.method == "deconvolve") {
    DeconvOptions opt;
    const auto& o = r.cfg.options;
    opt.basis_columns = r.cfg.basis_columns;
    if (o.contains("grid")) {
      opt.grid.lo = o.at("grid").value("lo", opt.grid.lo);
      opt.grid.hi = o.at("grid").value("hi", opt.grid.hi);
      opt.grid.points = o.at("grid").value("points", opt.grid.points);
    }
    opt.standard_errors = o.value("standard_errors", false);
    DiscretePrior g;
    if (r.cfg.calibrate) {
      std::vector<double> scan = o.value("penalty_scan", std::vector<double>{});
      const Calibration cal = calibrate_penalty(gaps, d, opt, scan);
      g = cal.prior;
      Table t;
      t.header = {"c0", "mean", "variance", "mean_error", "variance_error", "score", "converged"};
      for (const auto& s : cal.scan)
        t.rows.push_back({format_double(s.c0), format_double(s.mean), format_double(s.variance),
                          format_double(s.mean_error), format_double(s.variance_error), format_double(s.score),
                          s.converged ? "1" : "0"});
      write_table(r.output("calibration.csv"), t);
    } else {
      opt.c0 = r.cfg.c0.value_or(opt.c0);
      g = deconvolve(gaps, opt);
    }
    write_posteriors(r.output("posteriors.csv"), posterior_mean_deconv(gaps, g));
    write_density(r.output("density.csv"), g);
    prior["c0"] = g.c0;
    prior["mean"] = g.mean();
    prior["variance"] = g.variance();
    prior["iterations"] = g.iterations;
    prior["converged"] = g.converged;
    prior["basis_columns"] = opt.basis_columns;
    prior["grid"] = {{"lo", opt.grid.lo}, {"hi", opt.grid.hi}, {"points", opt.grid.points}};
  } else {
    throw ValidationError(fmt::format("unknown EB method '{}'", r.cfg.method));
  }
  write_json(r.output("prior.json"), prior);
}

void cmd_iat(Run& r) {
  require_dir(r.cfg.in, "--in");
  const fs::path tp = in_file(r.cfg.in, "iat_trials.csv");
  r.input(tp);
  const auto trials = load_trials(tp);
  prepare_out(r.cfg.out);
  IatOptions opt;
  auto pm = parse_pair_mode(r.cfg.pairs);
  if (!pm) throw ValidationError(fmt::format("unknown pair mode '{}'", r.cfg.pairs));
  opt.pairs = *pm;
  opt.min_trials = r.cfg.options.value("min_trials", opt.min_trials);
  const auto scores = score_all(trials, opt);
  write_scores(r.output("iat_scores.csv"), scores);
  write_discards(r.output("iat_discards.csv"), scores);
  std::map<std::string, int> cats;
  std::size_t scored = 0, clamped = 0;
  for (const auto& s : scores)
    if (!s.discarded()) {
      ++scored;
      clamped += s.clamped;
      ++cats[std::string(to_string(s.category))];
    }
  write_json(r.output("iat_summary.json"), {{"pair_mode", std::string(to_string(opt.pairs))},
                                            {"respondents", scores.size()}, {"scored", scored},
                                            {"discarded", scores.size() - scored}, {"clamped", clamped},
                                            {"categories", cats}});
}

void cmd_effects(Run& r) {
  const PanelSchema schema = schema_of(r);
  const Panel p = load_inputs(r, schema);
  prepare_out(r.cfg.out);
  const auto& o = r.cfg.options;
  LooOptions lo;
  lo.subject = subject_of(r.cfg);
  lo.covariates = covariates_of(o);
  lo.min_cell = o.value("min_cell", lo.min_cell);
  lo.mode = covariance_mode(o);
  CohortExclusions ex;
  if (o.contains("exclusions")) {
    for (const auto& [k, v] : o.at("exclusions").items()) {
      auto c = parse_int(k);
      if (!c) throw ValidationError(fmt::format("exclusion cohort '{}' is not a year", k));
      ex[static_cast<int>(*c)] = v.get<std::set<int>>();
    }
  } else {
    ex = exam_years_by_cohort(p.scores, p.students, lo.subject);
  }
  const LooResult loo = leave_one_year_out(p.scores, p.students, ex, lo);
  check_loo_provenance(loo);
  {
    Table t;
    t.header = {"cohort", "excluded_years", "teacher_id", "theta_hat", "theta_star", "value", "center", "scale"};
    auto add = [&](const LooTreatment& tr) {
      std::string years;
      for (int y : tr.excluded) years += (years.empty() ? "" : ";") + std::to_string(y);
      for (const auto& pst : tr.posteriors)
        t.rows.push_back({tr.cohort ? std::to_string(*tr.cohort) : std::string("all"), years, pst.teacher_id,
                          format_double(pst.theta_hat), format_double(pst.theta_star),
                          format_double(tr.value.at(pst.teacher_id)), format_double(tr.center),
                          format_double(tr.scale)});
    };
    for (const auto& tr : loo.cohorts) add(tr);
    add(loo.all_years);
    write_table(r.output("loo_treatments.csv"), t);
  }
  ExposureOptions eo;
  eo.subject = lo.subject;
  if (o.contains("grades")) eo.grades = o.at("grades").get<std::set<int>>();
  eo.interact_group_means = o.value("interact_group_means", false);
  const EffectsSample sample = build_exposure(p.scores, p.students, p.teachers, loo, eo);
  if (sample.rows.empty()) throw ValidationError("no exposure rows with a leave-out treatment");

  EverHorizon horizon;
  if (o.contains("ever_horizon")) {
    for (const auto& [k, v] : o.at("ever_horizon").items()) {
      auto c = parse_int(k);
      if (!c) throw ValidationError(fmt::format("ever_horizon cohort '{}' is not a year", k));
      horizon[static_cast<int>(*c)] = v.get<int>();
    }
  } else {
    horizon = default_ever_horizon(p);
  }
  const auto bins = default_age_bins();
  const auto outcomes = build_all_outcomes(p, horizon, bins, o.value("spell_window", 1));

  EffectsSpec spec;
  spec.fixed_effects.clear();
  std::string fes = o.value("fixed_effects", r.cfg.fixed_effects);
  std::stringstream ss(fes);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    auto f = parse_fixed_effect(item);
    if (!f) throw ValidationError(fmt::format("unknown fixed effect '{}'", item));
    spec.fixed_effects.push_back(*f);
  }
  auto cl = parse_cluster(o.value("cluster", r.cfg.cluster));
  if (!cl) throw ValidationError(fmt::format("unknown cluster spec '{}'", r.cfg.cluster));
  spec.cluster = *cl;

  std::vector<std::string> names = o.value("outcomes", std::vector<std::string>{
                                                           "grad_on_time", "grad_ever", "employed_formal@18-19",
                                                           "employed_formal@20-21", "employed_formal@22-23"});
  std::vector<EffectsResult> results;
  for (const auto& name : names) {
    const auto y = outcome_column(sample, outcomes, bins, p.student_iat, name);
    results.push_back(estimate_effects(sample, y, name, spec));
  }

  const std::vector<double> grid = o.value("percentiles", std::vector<double>{});
  if (!grid.empty()) {
    const std::string bin = o.value("percentile_bin", std::string("18-19"));
    const auto earnings = outcome_column(sample, outcomes, bins, p.student_iat, "earnings_uncond@" + bin);
    std::size_t b = 0;
    while (b < bins.size() && bins[b].label != bin) ++b;
    std::vector<double> reference;
    for (const auto& [id, rec] : outcomes)
      if (b < rec.labor.size() && rec.labor[b].earnings_uncond > 0) reference.push_back(rec.labor[b].earnings_uncond);
    const auto pe = percentile_effects(sample, earnings, reference, grid, spec);
    Table t;
    t.header = {"percentile", "threshold", "term", "estimate", "se", "mean_female", "mean_male", "n"};
    for (const auto& e : pe)
      for (const auto& c : e.result.coefficients)
        if (c.name == e.result.interaction_name() || c.name == "female" || c.name == e.result.treatment)
          t.rows.push_back({format_double(e.percentile), format_double(e.threshold), c.name, format_double(c.estimate),
                            format_double(c.se), format_double(e.result.mean_female),
                            format_double(e.result.mean_male), std::to_string(e.result.n)});
    write_table(r.output("percentile_effects.csv"), t);
  }

  if (!p.student_iat.empty()) {
    const auto y = outcome_column(sample, outcomes, bins, p.student_iat, "student_iat");
    if (std::count_if(y.begin(), y.end(), [](double v) { return std::isfinite(v); }) >= 2)
      results.push_back(internalization(sample, y, "theta"));
    if (!r.cfg.iat.empty()) {
      const auto with_iat = replace_treatment(sample, load_iat_scores(r));
      const auto yi = outcome_column(with_iat, outcomes, bins, p.student_iat, "student_iat");
      results.push_back(internalization(with_iat, yi, "iat"));
    }
  }

  write_effects(r.output("effects.csv"), results);
  json rep = json::array();
  for (const auto& e : results) rep.push_back(effects_report(e));
  write_json(r.output("effects.json"), {{"regressions", rep},
                                        {"rows", sample.rows.size()},
                                        {"excluded_no_treatment", sample.excluded_no_treatment}});
}

std::string file_stem(std::string s) {
  for (char& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') c = '_';
  return s;
}

void cmd_report(Run& r) {
  require_dir(r.cfg.in, "--in");
  const fs::path ep = in_file(r.cfg.in, "effects.csv");
  r.input(ep);
  const auto results = load_effects(ep);
  prepare_out(r.cfg.out);
  fs::create_directories(r.cfg.out / "report");
  std::map<std::string, std::vector<EffectsResult>> by_treatment;
  for (const auto& e : results) {
    by_treatment[e.treatment].push_back(e);
    json j = effects_report(e);
    json rows = json::array();
    for (const std::string& term : {e.interaction_name(), std::string("female"), e.treatment}) {
      const auto* c = e.find(term);
      if (c) rows.push_back({{"term", term}, {"estimate", c->estimate}, {"se_in_parentheses", fmt::format("({:.4f})", c->se)}});
    }
    j["table_rows"] = rows;
    j["mean_rows"] = {{"female", e.mean_female}, {"male", e.mean_male}};
    write_json(r.output(fmt::format("report/{}__{}.json", file_stem(e.outcome), file_stem(e.treatment))), j);
  }
  std::string text;
  for (const auto& [treatment, cols] : by_treatment) {
    text += fmt::format("Treatment: {}\n", treatment);
    text += format_effects_table(cols);
    text += '\n';
  }
  std::ofstream(r.output("report.txt"), std::ios::binary) << text;
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_manifest(const Run& r, double wall, const std::string& started) {
  json inputs = json::array(), outputs = json::array();
  for (const auto& p : r.inputs) inputs.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
  for (const auto& p : r.outputs) outputs.push_back({{"path", p.generic_string()}, {"sha256", sha256_file(r.cfg.out / p)}});
  write_json(r.cfg.out / "manifest.json", {{"tool", kToolName},
                                           {"version", kVersion},
                                           {"subcommand", r.cfg.subcommand},
                                           {"config", r.cfg.to_json()},
                                           {"rng", kRngName},
                                           {"inputs", inputs},
                                           {"outputs", outputs},
                                           {"started_at", started},
                                           {"wall_seconds", wall}});
}

void report_error(const RunConfig& cfg, std::ostream& err, const std::string& kind, const std::string& message,
                  int code) {
  const json j = {{"error", kind}, {"message", message}, {"exit_code", code}, {"subcommand", cfg.subcommand}};
  err << j.dump() << '\n';
  if (!cfg.out.empty()) {
    std::error_code ec;
    fs::create_directories(cfg.out, ec);
    if (!ec) {
      std::ofstream f(cfg.out / "error.json", std::ios::binary);
      if (f) f << j.dump(2) << '\n';
    }
  }
}

}  // namespace

json RunConfig::to_json() const {
  json j = {{"subcommand", subcommand}, {"in", in.string()}, {"out", out.string()}, {"config", config.string()},
            {"schema", schema.string()}, {"iat", iat.string()}, {"panel", panel.string()}, {"subject", subject},
            {"method", method}, {"calibrate", calibrate}, {"basis_columns", basis_columns}, {"cluster", cluster},
            {"fixed_effects", fixed_effects}, {"pairs", pairs}, {"threads", threads}, {"options", options}};
  j["c0"] = c0 ? json(*c0) : json(nullptr);
  j["seed"] = seed ? json(*seed) : json(nullptr);
  return j;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError(fmt::format("cannot read {}", path.string()));
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (f) {
    f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (f.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(f.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
  return hex;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Teacher assessment-gap estimation pipeline", kToolName};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", kVersion);
  RunConfig cfg;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", cfg.config, "JSON options file");
    s->add_option("--in", cfg.in, "input directory or file");
    s->add_option("--out", cfg.out, "output directory");
    s->add_option("--threads", cfg.threads, "worker threads")->check(CLI::PositiveNumber);
    s->add_option("--seed", cfg.seed, "random seed");
  };
  auto* sim = app.add_subcommand("simulate", "generate a synthetic panel with known truth");
  common(sim);
  auto* gaps = app.add_subcommand("gaps", "estimate per-teacher assessment gaps");
  common(gaps);
  gaps->add_option("--subject", cfg.subject, "math|language_arts|science");
  gaps->add_option("--schema", cfg.schema, "panel schema JSON");
  auto* het = app.add_subcommand("hetero", "variance decomposition and predictor regressions");
  common(het);
  het->add_option("--subject", cfg.subject, "math|language_arts|science");
  het->add_option("--panel", cfg.panel, "panel directory with teacher records");
  het->add_option("--schema", cfg.schema, "panel schema JSON");
  het->add_option("--iat", cfg.iat, "teacher IAT scores file");
  auto* eb = app.add_subcommand("eb", "empirical Bayes posterior means");
  common(eb);
  eb->add_option("--subject", cfg.subject, "math|language_arts|science");
  eb->add_option("--method", cfg.method, "gaussian|deconvolve")->check(CLI::IsMember({"gaussian", "deconvolve"}));
  eb->add_flag("--calibrate", cfg.calibrate, "choose the penalty by moment matching");
  eb->add_option("--c0", cfg.c0, "penalty weight");
  eb->add_option("--basis", cfg.basis_columns, "spline basis columns")->check(CLI::PositiveNumber);
  auto* iat = app.add_subcommand("iat-score", "score IAT trial logs");
  common(iat);
  iat->add_option("--pairs", cfg.pairs, "practice_and_test|test_only");
  auto* eff = app.add_subcommand("effects", "long-run effect regressions");
  common(eff);
  eff->add_option("--subject", cfg.subject, "math|language_arts|science");
  eff->add_option("--schema", cfg.schema, "panel schema JSON");
  eff->add_option("--cluster", cfg.cluster, "school|student+school|location_x_gender");
  eff->add_option("--fe", cfg.fixed_effects, "comma separated fixed effects");
  eff->add_option("--iat", cfg.iat, "teacher IAT scores file");
  auto* rep = app.add_subcommand("report", "tables from effects output");
  common(rep);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion& e) {
    out << kVersion << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    err << e.what() << '\n' << app.help();
    report_error(cfg, err, "usage", e.what(), 1);
    return 1;
  }
  cfg.subcommand = app.get_subcommands().front()->get_name();

  const std::string started = timestamp();
  const auto t0 = std::chrono::steady_clock::now();
  try {
    if (!cfg.config.empty()) {
      if (!fs::exists(cfg.config)) throw ValidationError(fmt::format("config '{}' does not exist", cfg.config.string()));
      cfg.options = read_json(cfg.config);
    }
    set_thread_count(cfg.threads);
    Run r{cfg, {}, {}, &err};
    if (!cfg.config.empty()) r.input(cfg.config);
    if (cfg.subcommand == "simulate") cmd_simulate(r);
    else if (cfg.subcommand == "gaps") cmd_gaps(r);
    else if (cfg.subcommand == "hetero") cmd_hetero(r);
    else if (cfg.subcommand == "eb") cmd_eb(r);
    else if (cfg.subcommand == "iat-score") cmd_iat(r);
    else if (cfg.subcommand == "effects") cmd_effects(r);
    else if (cfg.subcommand == "report") cmd_report(r);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(r, wall, started);
    out << fmt::format("{}: wrote {} files to {}\n", cfg.subcommand, r.outputs.size(), cfg.out.string());
    return 0;
  } catch (const ValidationError& e) {
    report_error(cfg, err, e.kind(), e.what(), 1);
    return 1;
  } catch (const std::exception& e) {
    report_error(cfg, err, "internal", e.what(), 2);
    return 2;
  }
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace gradegap::cli
