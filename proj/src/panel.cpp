#include "gradegap/panel.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <fstream>
#include <functional>
#include "json.hpp"
#include <set>
#include <tuple>

#include "gradegap/error.hpp"
#include "gradegap/table.hpp"

namespace gradegap {

std::string_view to_string(Subject s) {
  switch (s) {
    case Subject::math: return "math";
    case Subject::language_arts: return "language_arts";
    case Subject::science: return "science";
  }
  return "?";
}

std::optional<Subject> parse_subject(std::string_view s) {
  if (s == "math") return Subject::math;
  if (s == "language_arts") return Subject::language_arts;
  if (s == "science") return Subject::science;
  return std::nullopt;
}

std::string_view to_string(ContractType c) {
  switch (c) {
    case ContractType::tenured: return "tenured";
    case ContractType::fixed_term: return "fixed_term";
    case ContractType::other: return "other";
  }
  return "?";
}

std::optional<ContractType> parse_contract(std::string_view s) {
  if (s == "tenured") return ContractType::tenured;
  if (s == "fixed_term") return ContractType::fixed_term;
  if (s == "other") return ContractType::other;
  return std::nullopt;
}

std::string_view to_string(EducationEventKind k) {
  switch (k) {
    case EducationEventKind::graduated: return "graduated";
    case EducationEventKind::college_applied: return "college_applied";
    case EducationEventKind::college_admitted: return "college_admitted";
    case EducationEventKind::college_enrolled: return "college_enrolled";
  }
  return "?";
}

std::optional<EducationEventKind> parse_event(std::string_view s) {
  if (s == "graduated") return EducationEventKind::graduated;
  if (s == "college_applied") return EducationEventKind::college_applied;
  if (s == "college_admitted") return EducationEventKind::college_admitted;
  if (s == "college_enrolled") return EducationEventKind::college_enrolled;
  return std::nullopt;
}

std::vector<AgeBin> default_age_bins() {
  // modal graduation age is 17
  return {{"18-19", 1, 2}, {"20-21", 3, 4}, {"22-23", 5, 6}};
}

std::string TableSchema::column(const std::string& logical) const {
  auto it = columns.find(logical);
  return it == columns.end() ? logical : it->second;
}

PanelSchema PanelSchema::defaults() {
  PanelSchema s;
  for (const auto* name : {"students", "scores", "teachers", "employment", "events", "student_iat"})
    s.tables[name] = TableSchema{fmt::format("{}.csv", name), {}};
  return s;
}

PanelSchema PanelSchema::from_json(const nlohmann::json& doc) {
  PanelSchema s = defaults();
  if (doc.contains("delimiter")) {
    const auto d = doc.at("delimiter").get<std::string>();
    if (d == "\\t" || d == "tab" || d == "\t")
      s.delimiter = '\t';
    else if (d.size() == 1)
      s.delimiter = d[0];
    else
      throw SchemaError(fmt::format("unsupported delimiter '{}'", d));
  }
  if (doc.contains("tables")) {
    for (const auto& [name, t] : doc.at("tables").items()) {
      auto& ts = s.tables[name];
      if (t.contains("file")) ts.file = t.at("file").get<std::string>();
      if (t.contains("columns"))
        for (const auto& [logical, col] : t.at("columns").items()) ts.columns[logical] = col.get<std::string>();
    }
  }
  return s;
}

PanelSchema PanelSchema::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError(fmt::format("cannot open schema '{}'", path.string()));
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(fmt::format("schema '{}': {}", path.string(), e.what()));
  }
}

const TableSchema& PanelSchema::table(const std::string& name) const {
  auto it = tables.find(name);
  if (it == tables.end()) throw SchemaError(fmt::format("schema has no table '{}'", name));
  return it->second;
}

namespace {

// Maps the logical fields of one table onto columns and parses one row at a
// time; the first failure in a row is kept as its reject reason.
class RowReader {
 public:
  RowReader(const Table& t, const TableSchema& schema, std::initializer_list<const char*> required,
            std::initializer_list<const char*> optional = {}) {
    for (const char* f : required) cols_[f] = t.require_column(schema.column(f));
    for (const char* f : optional)
      if (auto c = t.column(schema.column(f))) cols_[f] = *c;
  }

  void start(const std::vector<std::string>* row) {
    row_ = row;
    reason_.clear();
  }
  bool ok() const { return reason_.empty(); }
  const std::string& reason() const { return reason_; }
  void fail(std::string why) {
    if (reason_.empty()) reason_ = std::move(why);
  }
  bool has(const char* f) const { return cols_.count(f) > 0; }

  std::string_view raw(const char* f) {
    auto it = cols_.find(f);
    if (it == cols_.end()) return {};
    if (it->second >= row_->size()) {
      fail(fmt::format("row too short for '{}'", f));
      return {};
    }
    return (*row_)[it->second];
  }
  std::string text(const char* f) {
    auto s = raw(f);
    if (is_missing(s) && has(f)) fail(fmt::format("missing {}", f));
    return std::string(s);
  }
  double real(const char* f) {
    auto v = parse_double(raw(f));
    if (!v) fail(fmt::format("{} is not a number", f));
    return v.value_or(0.0);
  }
  double real_or_missing(const char* f) {
    auto s = raw(f);
    if (is_missing(s)) return kMissing;
    auto v = parse_double(s);
    if (!v) fail(fmt::format("{} is not a number", f));
    return v.value_or(kMissing);
  }
  long long integer(const char* f) {
    auto v = parse_int(raw(f));
    if (!v) fail(fmt::format("{} is not an integer", f));
    return v.value_or(0);
  }
  bool boolean(const char* f) {
    auto v = parse_bool(raw(f));
    if (!v) fail(fmt::format("{} is not a boolean", f));
    return v.value_or(false);
  }
  std::optional<bool> boolean_or_missing(const char* f) {
    auto s = raw(f);
    if (is_missing(s)) return std::nullopt;
    auto v = parse_bool(s);
    if (!v) fail(fmt::format("{} is not a boolean", f));
    return v;
  }

 private:
  std::map<std::string, std::size_t> cols_;
  const std::vector<std::string>* row_ = nullptr;
  std::string reason_;
};

template <typename Key>
void check_unique(const std::string& table, const std::vector<Key>& keys,
                  const std::function<std::string(const Key&)>& show) {
  std::set<Key> seen;
  std::vector<std::string> dups;
  for (const auto& k : keys)
    if (!seen.insert(k).second) dups.push_back(show(k));
  if (!dups.empty()) {
    std::sort(dups.begin(), dups.end());
    dups.erase(std::unique(dups.begin(), dups.end()), dups.end());
    throw DuplicateKeyError(fmt::format("{}: duplicate key {}", table, fmt::join(dups, "; ")));
  }
}

std::string bool_text(bool b) { return b ? "1" : "0"; }
std::string opt_text(const std::optional<std::string>& s) { return s ? *s : "NA"; }
std::string opt_text(const std::optional<bool>& b) { return b ? bool_text(*b) : "NA"; }
std::string opt_text(const std::optional<double>& d) { return d ? format_double(*d) : "NA"; }

bool valid_band(std::string_view b) {
  return std::find(kExperienceBands.begin(), kExperienceBands.end(), b) != kExperienceBands.end();
}

}  // namespace

std::vector<StudentRecord> load_students(const std::filesystem::path& path, const TableSchema& schema,
                                         char delimiter, std::vector<Reject>& rejects) {
  const Table t = read_table(path, delimiter);
  RowReader r(t, schema,
              {"student_id", "female", "age_months", "birthplace_code", "language_code", "school_id", "classroom_id",
               "grade", "school_year"},
              {"mother_education", "cct_flag"});
  std::vector<StudentRecord> out;
  for (std::size_t line = 0; line < t.rows.size(); ++line) {
    r.start(&t.rows[line]);
    StudentRecord s;
    s.student_id = r.text("student_id");
    s.female = r.boolean("female");
    s.age_months = static_cast<int>(r.integer("age_months"));
    s.birthplace_code = r.text("birthplace_code");
    s.language_code = r.text("language_code");
    if (r.has("mother_education") && !is_missing(r.raw("mother_education")))
      s.mother_education = std::string(r.raw("mother_education"));
    s.cct_flag = r.boolean_or_missing("cct_flag");
    s.school_id = r.text("school_id");
    s.classroom_id = r.text("classroom_id");
    s.grade = static_cast<int>(r.integer("grade"));
    s.school_year = static_cast<int>(r.integer("school_year"));
    if (r.ok() && (s.grade < 7 || s.grade > 11)) r.fail("grade out of range");
    if (r.ok() && s.age_months <= 0) r.fail("age_months must be positive");
    if (!r.ok()) {
      rejects.push_back({"students", line + 1, r.reason()});
      continue;
    }
    out.push_back(std::move(s));
  }
  using Key = std::pair<std::string, int>;
  std::vector<Key> keys;
  for (const auto& s : out) keys.emplace_back(s.student_id, s.school_year);
  check_unique<Key>("students", keys, [](const Key& k) { return fmt::format("({}, {})", k.first, k.second); });

  const auto projected = projected_graduation_years(out);
  for (auto& s : out) s.cohort_projected_grad = projected.at(s.student_id);
  return out;
}

std::vector<ScoreObservation> load_scores(const std::filesystem::path& path, const TableSchema& schema,
                                          char delimiter, std::vector<Reject>& rejects) {
  const Table t = read_table(path, delimiter);
  RowReader r(t, schema, {"student_id", "teacher_id", "subject", "school_year", "teacher_score", "blind_score"},
              {"lagged_math", "lagged_language", "lagged_physed", "standardized"});
  std::vector<ScoreObservation> out;
  for (std::size_t line = 0; line < t.rows.size(); ++line) {
    r.start(&t.rows[line]);
    ScoreObservation o;
    o.student_id = r.text("student_id");
    o.teacher_id = r.text("teacher_id");
    const auto subject = parse_subject(r.raw("subject"));
    if (!subject) r.fail(fmt::format("unknown subject '{}'", r.raw("subject")));
    o.subject = subject.value_or(Subject::math);
    o.school_year = static_cast<int>(r.integer("school_year"));
    o.teacher_score = r.real("teacher_score");
    o.blind_score = r.real("blind_score");
    o.lagged_math = r.real_or_missing("lagged_math");
    o.lagged_language = r.real_or_missing("lagged_language");
    o.lagged_physed = r.real_or_missing("lagged_physed");
    if (r.has("standardized")) o.standardized = r.boolean_or_missing("standardized").value_or(false);
    if (!r.ok()) {
      rejects.push_back({"scores", line + 1, r.reason()});
      continue;
    }
    out.push_back(std::move(o));
  }
  using Key = std::tuple<std::string, std::string, int, int>;
  std::vector<Key> keys;
  for (const auto& o : out) keys.emplace_back(o.student_id, o.teacher_id, static_cast<int>(o.subject), o.school_year);
  check_unique<Key>("scores", keys, [](const Key& k) {
    return fmt::format("({}, {}, {}, {})", std::get<0>(k), std::get<1>(k),
                       to_string(static_cast<Subject>(std::get<2>(k))), std::get<3>(k));
  });
  return out;
}

std::vector<TeacherRecord> load_teachers(const std::filesystem::path& path, const TableSchema& schema,
                                         char delimiter, std::vector<Reject>& rejects) {
  const Table t = read_table(path, delimiter);
  RowReader r(t, schema,
              {"teacher_id", "subject", "female", "age_years", "contract_type", "experience_public_band",
               "experience_private_band", "higher_ed_university", "school_id"},
              {"eval_zscore", "eval_passed", "school_location"});
  std::vector<TeacherRecord> out;
  for (std::size_t line = 0; line < t.rows.size(); ++line) {
    r.start(&t.rows[line]);
    TeacherRecord tr;
    tr.teacher_id = r.text("teacher_id");
    const auto subject = parse_subject(r.raw("subject"));
    if (!subject) r.fail(fmt::format("unknown subject '{}'", r.raw("subject")));
    tr.subject = subject.value_or(Subject::math);
    tr.female = r.boolean("female");
    tr.age_years = static_cast<int>(r.integer("age_years"));
    const auto contract = parse_contract(r.raw("contract_type"));
    if (!contract) r.fail(fmt::format("unknown contract type '{}'", r.raw("contract_type")));
    tr.contract_type = contract.value_or(ContractType::other);
    tr.experience_public_band = r.text("experience_public_band");
    tr.experience_private_band = r.text("experience_private_band");
    if (r.ok() && !valid_band(tr.experience_public_band)) r.fail("experience_public_band outside band set");
    if (r.ok() && !valid_band(tr.experience_private_band)) r.fail("experience_private_band outside band set");
    tr.higher_ed_university = r.boolean("higher_ed_university");
    const double z = r.real_or_missing("eval_zscore");
    if (!std::isnan(z)) tr.eval_zscore = z;
    tr.eval_passed = r.boolean_or_missing("eval_passed");
    tr.school_id = r.text("school_id");
    tr.school_location = r.has("school_location") ? std::string(r.raw("school_location")) : tr.school_id;
    if (!r.ok()) {
      rejects.push_back({"teachers", line + 1, r.reason()});
      continue;
    }
    out.push_back(std::move(tr));
  }
  using Key = std::pair<std::string, int>;
  std::vector<Key> keys;
  for (const auto& tr : out) keys.emplace_back(tr.teacher_id, static_cast<int>(tr.subject));
  check_unique<Key>("teachers", keys, [](const Key& k) {
    return fmt::format("({}, {})", k.first, to_string(static_cast<Subject>(k.second)));
  });
  return out;
}

std::vector<EmploymentMonth> load_employment(const std::filesystem::path& path, const TableSchema& schema,
                                             char delimiter, std::vector<Reject>& rejects) {
  const Table t = read_table(path, delimiter);
  RowReader r(t, schema,
              {"worker_id", "employer_id", "year", "month", "earnings_usd2010", "paid_hours", "formal_contract"});
  std::vector<EmploymentMonth> out;
  for (std::size_t line = 0; line < t.rows.size(); ++line) {
    r.start(&t.rows[line]);
    EmploymentMonth m;
    m.worker_id = r.text("worker_id");
    m.employer_id = r.text("employer_id");
    m.year = static_cast<int>(r.integer("year"));
    m.month = static_cast<int>(r.integer("month"));
    m.earnings_usd2010 = r.real("earnings_usd2010");
    m.paid_hours = r.real("paid_hours");
    m.formal_contract = r.boolean("formal_contract");
    if (r.ok() && (m.month < 1 || m.month > 12)) r.fail("month out of range");
    if (r.ok() && m.earnings_usd2010 < 0) r.fail("negative earnings");
    if (r.ok() && m.paid_hours < 0) r.fail("negative paid hours");
    if (!r.ok()) {
      rejects.push_back({"employment", line + 1, r.reason()});
      continue;
    }
    out.push_back(std::move(m));
  }
  using Key = std::tuple<std::string, std::string, int, int>;
  std::vector<Key> keys;
  for (const auto& m : out) keys.emplace_back(m.worker_id, m.employer_id, m.year, m.month);
  check_unique<Key>("employment", keys, [](const Key& k) {
    return fmt::format("({}, {}, {}-{:02d})", std::get<0>(k), std::get<1>(k), std::get<2>(k), std::get<3>(k));
  });
  return out;
}

std::vector<EducationEvent> load_events(const std::filesystem::path& path, const TableSchema& schema,
                                        char delimiter, std::vector<Reject>& rejects) {
  const Table t = read_table(path, delimiter);
  RowReader r(t, schema, {"student_id", "event", "year"});
  std::vector<EducationEvent> out;
  for (std::size_t line = 0; line < t.rows.size(); ++line) {
    r.start(&t.rows[line]);
    EducationEvent e;
    e.student_id = r.text("student_id");
    const auto kind = parse_event(r.raw("event"));
    if (!kind) r.fail(fmt::format("unknown event '{}'", r.raw("event")));
    e.kind = kind.value_or(EducationEventKind::graduated);
    e.year = static_cast<int>(r.integer("year"));
    if (!r.ok()) {
      rejects.push_back({"events", line + 1, r.reason()});
      continue;
    }
    out.push_back(std::move(e));
  }
  using Key = std::tuple<std::string, int, int>;
  std::vector<Key> keys;
  for (const auto& e : out) keys.emplace_back(e.student_id, static_cast<int>(e.kind), e.year);
  check_unique<Key>("events", keys, [](const Key& k) {
    return fmt::format("({}, {}, {})", std::get<0>(k), to_string(static_cast<EducationEventKind>(std::get<1>(k))),
                       std::get<2>(k));
  });
  return out;
}

std::vector<StudentIat> load_student_iat(const std::filesystem::path& path, const TableSchema& schema,
                                         char delimiter, std::vector<Reject>& rejects) {
  const Table t = read_table(path, delimiter);
  RowReader r(t, schema, {"student_id", "school_year", "d_score"});
  std::vector<StudentIat> out;
  for (std::size_t line = 0; line < t.rows.size(); ++line) {
    r.start(&t.rows[line]);
    StudentIat s;
    s.student_id = r.text("student_id");
    s.school_year = static_cast<int>(r.integer("school_year"));
    s.d_score = r.real("d_score");
    if (r.ok() && (s.d_score < -2.0 || s.d_score > 2.0)) r.fail("d_score outside [-2, 2]");
    if (!r.ok()) {
      rejects.push_back({"student_iat", line + 1, r.reason()});
      continue;
    }
    out.push_back(std::move(s));
  }
  using Key = std::pair<std::string, int>;
  std::vector<Key> keys;
  for (const auto& s : out) keys.emplace_back(s.student_id, s.school_year);
  check_unique<Key>("student_iat", keys, [](const Key& k) { return fmt::format("({}, {})", k.first, k.second); });
  return out;
}

Panel load_panel(const std::filesystem::path& dir, const PanelSchema& schema) {
  Panel p;
  auto path_of = [&](const char* table) -> std::optional<std::filesystem::path> {
    auto it = schema.tables.find(table);
    if (it == schema.tables.end()) return std::nullopt;
    auto path = dir / it->second.file;
    if (!std::filesystem::exists(path)) return std::nullopt;
    return path;
  };
  bool any = false;
  if (auto f = path_of("students")) {
    p.students = load_students(*f, schema.table("students"), schema.delimiter, p.rejects);
    any = true;
  }
  if (auto f = path_of("scores")) {
    p.scores = load_scores(*f, schema.table("scores"), schema.delimiter, p.rejects);
    any = true;
  }
  if (auto f = path_of("teachers")) {
    p.teachers = load_teachers(*f, schema.table("teachers"), schema.delimiter, p.rejects);
    any = true;
  }
  if (auto f = path_of("employment")) {
    p.employment = load_employment(*f, schema.table("employment"), schema.delimiter, p.rejects);
    any = true;
  }
  if (auto f = path_of("events")) {
    p.events = load_events(*f, schema.table("events"), schema.delimiter, p.rejects);
    any = true;
  }
  if (auto f = path_of("student_iat")) {
    p.student_iat = load_student_iat(*f, schema.table("student_iat"), schema.delimiter, p.rejects);
    any = true;
  }
  if (!any) throw ValidationError(fmt::format("no panel tables found in '{}'", dir.string()));
  return p;
}

void write_students(const std::filesystem::path& path, std::span<const StudentRecord> rows, char delimiter) {
  Table t;
  t.header = {"student_id", "female", "age_months", "birthplace_code", "language_code", "mother_education",
              "cct_flag", "school_id", "classroom_id", "grade", "school_year", "cohort_projected_grad"};
  for (const auto& s : rows)
    t.rows.push_back({s.student_id, bool_text(s.female), std::to_string(s.age_months), s.birthplace_code,
                      s.language_code, opt_text(s.mother_education), opt_text(s.cct_flag), s.school_id,
                      s.classroom_id, std::to_string(s.grade), std::to_string(s.school_year),
                      std::to_string(s.cohort_projected_grad)});
  write_table(path, t, delimiter);
}

void write_scores(const std::filesystem::path& path, std::span<const ScoreObservation> rows, char delimiter) {
  Table t;
  t.header = {"student_id", "teacher_id", "subject", "school_year", "teacher_score", "blind_score",
              "lagged_math", "lagged_language", "lagged_physed", "standardized"};
  for (const auto& o : rows)
    t.rows.push_back({o.student_id, o.teacher_id, std::string(to_string(o.subject)), std::to_string(o.school_year),
                      format_double(o.teacher_score), format_double(o.blind_score), format_double(o.lagged_math),
                      format_double(o.lagged_language), format_double(o.lagged_physed), bool_text(o.standardized)});
  write_table(path, t, delimiter);
}

void write_teachers(const std::filesystem::path& path, std::span<const TeacherRecord> rows, char delimiter) {
  Table t;
  t.header = {"teacher_id", "subject", "female", "age_years", "contract_type", "experience_public_band",
              "experience_private_band", "higher_ed_university", "eval_zscore", "eval_passed", "school_id",
              "school_location"};
  for (const auto& r : rows)
    t.rows.push_back({r.teacher_id, std::string(to_string(r.subject)), bool_text(r.female),
                      std::to_string(r.age_years), std::string(to_string(r.contract_type)),
                      r.experience_public_band, r.experience_private_band, bool_text(r.higher_ed_university),
                      opt_text(r.eval_zscore), opt_text(r.eval_passed), r.school_id, r.school_location});
  write_table(path, t, delimiter);
}

void write_employment(const std::filesystem::path& path, std::span<const EmploymentMonth> rows, char delimiter) {
  Table t;
  t.header = {"worker_id", "employer_id", "year", "month", "earnings_usd2010", "paid_hours", "formal_contract"};
  for (const auto& m : rows)
    t.rows.push_back({m.worker_id, m.employer_id, std::to_string(m.year), std::to_string(m.month),
                      format_double(m.earnings_usd2010), format_double(m.paid_hours), bool_text(m.formal_contract)});
  write_table(path, t, delimiter);
}

void write_events(const std::filesystem::path& path, std::span<const EducationEvent> rows, char delimiter) {
  Table t;
  t.header = {"student_id", "event", "year"};
  for (const auto& e : rows) t.rows.push_back({e.student_id, std::string(to_string(e.kind)), std::to_string(e.year)});
  write_table(path, t, delimiter);
}

void write_student_iat(const std::filesystem::path& path, std::span<const StudentIat> rows, char delimiter) {
  Table t;
  t.header = {"student_id", "school_year", "d_score"};
  for (const auto& s : rows) t.rows.push_back({s.student_id, std::to_string(s.school_year), format_double(s.d_score)});
  write_table(path, t, delimiter);
}

void write_rejects(const std::filesystem::path& path, std::span<const Reject> rows, char delimiter) {
  Table t;
  t.header = {"table", "line", "reason"};
  for (const auto& r : rows) t.rows.push_back({r.table, std::to_string(r.line), r.reason});
  write_table(path, t, delimiter);
}

void write_panel(const std::filesystem::path& dir, const Panel& panel, const PanelSchema& schema) {
  std::filesystem::create_directories(dir);
  const char d = schema.delimiter;
  if (!panel.students.empty()) write_students(dir / schema.table("students").file, panel.students, d);
  if (!panel.scores.empty()) write_scores(dir / schema.table("scores").file, panel.scores, d);
  if (!panel.teachers.empty()) write_teachers(dir / schema.table("teachers").file, panel.teachers, d);
  if (!panel.employment.empty()) write_employment(dir / schema.table("employment").file, panel.employment, d);
  if (!panel.events.empty()) write_events(dir / schema.table("events").file, panel.events, d);
  if (!panel.student_iat.empty()) write_student_iat(dir / schema.table("student_iat").file, panel.student_iat, d);
}

std::vector<ScoreObservation> standardize_scores(std::vector<ScoreObservation> obs) {
  struct Moments {
    double sum = 0.0;
    double n = 0.0;
    double ss = 0.0;
    double first = kMissing;
    bool distinct = false;
  };
  // two passes in input order; cells keyed by (year, subject)
  auto zscore = [&](auto getter, auto key_of, const char* what) {
    std::map<std::pair<int, int>, Moments> cells;
    for (auto& o : obs) {
      const double v = getter(o);
      if (std::isnan(v)) continue;
      auto& m = cells[key_of(o)];
      if (m.n == 0)
        m.first = v;
      else if (v != m.first)
        m.distinct = true;
      m.sum += v;
      m.n += 1;
    }
    for (auto& o : obs) {
      const double v = getter(o);
      if (std::isnan(v)) continue;
      auto& m = cells[key_of(o)];
      const double d = v - m.sum / m.n;
      m.ss += d * d;
    }
    for (const auto& [k, m] : cells) {
      if (!m.distinct || m.ss <= 0.0)
        throw DegenerateError(fmt::format("degenerate {} cell (year {}, {}): fewer than two distinct values", what,
                                          k.first, to_string(static_cast<Subject>(k.second))));
    }
    for (auto& o : obs) {
      double& v = getter(o);
      if (std::isnan(v)) continue;
      const auto& m = cells[key_of(o)];
      v = (v - m.sum / m.n) / std::sqrt(m.ss / m.n);
    }
  };
  auto own_cell = [](const ScoreObservation& o) { return std::make_pair(o.school_year, static_cast<int>(o.subject)); };
  auto lag_cell = [](Subject s) {
    return [s](const ScoreObservation& o) { return std::make_pair(o.school_year, static_cast<int>(s)); };
  };
  zscore([](ScoreObservation& o) -> double& { return o.teacher_score; }, own_cell, "teacher score");
  zscore([](ScoreObservation& o) -> double& { return o.blind_score; }, own_cell, "blind score");
  zscore([](ScoreObservation& o) -> double& { return o.lagged_math; }, lag_cell(Subject::math), "lagged math");
  zscore([](ScoreObservation& o) -> double& { return o.lagged_language; }, lag_cell(Subject::language_arts),
         "lagged language");
  // physical education has no Subject value; its lag cells are keyed by year alone
  zscore([](ScoreObservation& o) -> double& { return o.lagged_physed; },
         [](const ScoreObservation& o) { return std::make_pair(o.school_year, -1); }, "lagged physed");
  for (auto& o : obs) o.standardized = true;
  return obs;
}

int projected_graduation_year(std::span<const std::pair<int, int>> year_grade) {
  if (year_grade.empty()) throw ValidationError("missing enrollment history: cannot project graduation year");
  const auto earliest = *std::min_element(year_grade.begin(), year_grade.end());
  return earliest.first + (11 - earliest.second);
}

std::map<std::string, int> projected_graduation_years(std::span<const StudentRecord> students) {
  std::map<std::string, std::vector<std::pair<int, int>>> history;
  for (const auto& s : students) history[s.student_id].emplace_back(s.school_year, s.grade);
  std::map<std::string, int> out;
  for (const auto& [id, h] : history) out[id] = projected_graduation_year(h);
  return out;
}

DominantEmployer dominant_annual_employer(std::span<const EmploymentMonth> months, std::string_view worker,
                                          int year) {
  DominantEmployer out;
  std::array<std::map<std::string, double>, 4> by_quarter;
  std::map<std::string, double> annual_total;
  for (const auto& m : months) {
    if (m.worker_id != worker || m.year != year) continue;
    by_quarter[static_cast<std::size_t>((m.month - 1) / 3)][m.employer_id] += m.earnings_usd2010;
    annual_total[m.employer_id] += m.earnings_usd2010;
  }
  std::map<std::string, int> quarters_won;
  for (std::size_t q = 0; q < 4; ++q) {
    const std::string* best = nullptr;
    double best_pay = 0.0;
    // map order makes the smallest id win ties within a quarter
    for (const auto& [id, pay] : by_quarter[q]) {
      if (pay > best_pay) {
        best = &id;
        best_pay = pay;
      }
    }
    if (best) {
      out.quarterly[q] = *best;
      ++quarters_won[*best];
    }
  }
  const std::string* winner = nullptr;
  for (const auto& [id, won] : quarters_won) {
    if (!winner) {
      winner = &id;
      continue;
    }
    const int best_won = quarters_won.at(*winner);
    if (won > best_won || (won == best_won && annual_total.at(id) > annual_total.at(*winner))) winner = &id;
  }
  if (winner) out.annual = *winner;
  return out;
}

std::vector<LaborOutcome> build_labor_outcomes(std::span<const EmploymentMonth> worker_months, int projected_grad,
                                               std::span<const AgeBin> bins, int spell_window) {
  if (spell_window < 1) throw ValidationError("spell window must be at least one month");
  std::vector<LaborOutcome> out;
  std::string worker = worker_months.empty() ? std::string() : worker_months.front().worker_id;
  for (const auto& bin : bins) {
    LaborOutcome lo;
    double earn = 0.0;
    double hours = 0.0;
    int months_with_dominant = 0;
    std::vector<int> formal_months;  // year*12 + month index
    for (int y = projected_grad + bin.first_offset; y <= projected_grad + bin.last_offset; ++y) {
      const auto dom = dominant_annual_employer(worker_months, worker, y);
      if (!dom.annual) continue;
      for (const auto& m : worker_months) {
        if (m.year != y || m.employer_id != *dom.annual) continue;
        earn += m.earnings_usd2010;
        hours += m.paid_hours;
        ++months_with_dominant;
        if (m.formal_contract && m.earnings_usd2010 > 0.0) formal_months.push_back(y * 12 + (m.month - 1));
      }
    }
    std::sort(formal_months.begin(), formal_months.end());
    int run = 0;
    for (std::size_t i = 0; i < formal_months.size(); ++i) {
      run = (i > 0 && formal_months[i] == formal_months[i - 1] + 1) ? run + 1 : 1;
      if (run >= spell_window) lo.employed_formal = true;
    }
    if (months_with_dominant > 0) {
      lo.earnings_cond = earn / months_with_dominant;
      lo.hours_cond = hours / months_with_dominant;
    }
    lo.earnings_uncond = lo.employed_formal ? lo.earnings_cond : 0.0;
    lo.hours_uncond = lo.employed_formal ? lo.hours_cond : 0.0;
    out.push_back(lo);
  }
  return out;
}

OutcomeRecord build_outcomes(const std::string& student_id, int projected_grad,
                             std::span<const EducationEvent> student_events,
                             std::span<const EmploymentMonth> worker_months, const EverHorizon& horizon,
                             std::span<const AgeBin> bins, int spell_window) {
  OutcomeRecord o;
  o.student_id = student_id;
  o.projected_grad = projected_grad;
  auto it = horizon.find(projected_grad);
  if (it == horizon.end())
    throw ValidationError(fmt::format("no 'ever' horizon configured for cohort {}", projected_grad));
  const int last_ever = projected_grad + it->second;

  auto flags = [&](EducationEventKind kind, int on_time_year) {
    std::pair<bool, bool> f{false, false};
    for (const auto& e : student_events) {
      if (e.student_id != student_id || e.kind != kind) continue;
      if (e.year <= on_time_year) f.first = true;
      if (e.year <= last_ever) f.second = true;
    }
    return f;
  };
  std::tie(o.grad_on_time, o.grad_ever) = flags(EducationEventKind::graduated, projected_grad);
  // college "on time" means the first year after projected graduation
  std::tie(o.college_applied_on_time, o.college_applied_ever) = flags(EducationEventKind::college_applied, projected_grad + 1);
  std::tie(o.college_admitted_on_time, o.college_admitted_ever) =
      flags(EducationEventKind::college_admitted, projected_grad + 1);
  std::tie(o.college_enrolled_on_time, o.college_enrolled_ever) =
      flags(EducationEventKind::college_enrolled, projected_grad + 1);

  // a later stage implies the earlier ones on the same horizon
  o.grad_ever = o.grad_ever || o.grad_on_time;
  o.college_admitted_on_time = o.college_admitted_on_time || o.college_enrolled_on_time;
  o.college_admitted_ever = o.college_admitted_ever || o.college_enrolled_ever || o.college_admitted_on_time;
  o.college_applied_on_time = o.college_applied_on_time || o.college_admitted_on_time;
  o.college_applied_ever = o.college_applied_ever || o.college_admitted_ever || o.college_applied_on_time;
  o.college_enrolled_ever = o.college_enrolled_ever || o.college_enrolled_on_time;

  o.labor = build_labor_outcomes(worker_months, projected_grad, bins, spell_window);
  return o;
}

}  // namespace gradegap
