#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

namespace gradegap {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

enum class Subject { math, language_arts, science };

std::string_view to_string(Subject s);
std::optional<Subject> parse_subject(std::string_view s);

// One enrollment row: a student in a classroom for one school year.
struct StudentRecord {
  std::string student_id;
  bool female = false;
  int age_months = 0;
  std::string birthplace_code;
  std::string language_code;
  std::optional<std::string> mother_education;
  std::optional<bool> cct_flag;
  std::string school_id;
  std::string classroom_id;
  int grade = 7;
  int school_year = 0;
  int cohort_projected_grad = 0;  // derived
};

struct ScoreObservation {
  std::string student_id;
  std::string teacher_id;
  Subject subject = Subject::math;
  int school_year = 0;
  double teacher_score = 0.0;
  double blind_score = 0.0;
  // NaN marks a missing lag
  double lagged_math = kMissing;
  double lagged_language = kMissing;
  double lagged_physed = kMissing;
  bool standardized = false;
};

enum class ContractType { tenured, fixed_term, other };
std::string_view to_string(ContractType c);
std::optional<ContractType> parse_contract(std::string_view s);

// Experience bands, in the order of the descriptive tables.
inline constexpr std::array<std::string_view, 5> kExperienceBands = {"none", "<2", "2-5", "6-10", ">10"};

struct TeacherRecord {
  std::string teacher_id;
  Subject subject = Subject::math;
  bool female = false;
  int age_years = 0;
  ContractType contract_type = ContractType::other;
  std::string experience_public_band = "none";
  std::string experience_private_band = "none";
  bool higher_ed_university = false;
  std::optional<double> eval_zscore;
  std::optional<bool> eval_passed;
  std::string school_id;
  std::string school_location;  // region key for location fixed effects
};

struct EmploymentMonth {
  std::string worker_id;
  std::string employer_id;
  int year = 0;
  int month = 1;  // 1..12
  double earnings_usd2010 = 0.0;
  double paid_hours = 0.0;
  bool formal_contract = false;
};

enum class EducationEventKind { graduated, college_applied, college_admitted, college_enrolled };
std::string_view to_string(EducationEventKind k);
std::optional<EducationEventKind> parse_event(std::string_view s);

struct EducationEvent {
  std::string student_id;
  EducationEventKind kind = EducationEventKind::graduated;
  int year = 0;
};

// A student's own IAT score (internalization outcome).
struct StudentIat {
  std::string student_id;
  int school_year = 0;
  double d_score = 0.0;
};

struct AgeBin {
  std::string label;
  int first_offset = 1;  // years after projected graduation
  int last_offset = 2;
};

std::vector<AgeBin> default_age_bins();

struct LaborOutcome {
  bool employed_formal = false;
  double earnings_uncond = 0.0;
  double earnings_cond = kMissing;
  double hours_uncond = 0.0;
  double hours_cond = kMissing;
};

struct OutcomeRecord {
  std::string student_id;
  int projected_grad = 0;
  bool grad_on_time = false;
  bool grad_ever = false;
  bool college_applied_on_time = false;
  bool college_applied_ever = false;
  bool college_admitted_on_time = false;
  bool college_admitted_ever = false;
  bool college_enrolled_on_time = false;
  bool college_enrolled_ever = false;
  std::vector<LaborOutcome> labor;  // one per age bin
};

struct Reject {
  std::string table;
  std::size_t line = 0;  // 1-based data line (header excluded)
  std::string reason;
};

// Logical field -> column name, per table. Unmapped fields use their logical name.
struct TableSchema {
  std::string file;
  std::map<std::string, std::string> columns;
  std::string column(const std::string& logical) const;
};

struct PanelSchema {
  char delimiter = ',';
  std::map<std::string, TableSchema> tables;

  static PanelSchema defaults();
  static PanelSchema from_json(const nlohmann::json& doc);
  static PanelSchema load(const std::filesystem::path& path);
  const TableSchema& table(const std::string& name) const;
};

struct Panel {
  std::vector<StudentRecord> students;
  std::vector<ScoreObservation> scores;
  std::vector<TeacherRecord> teachers;
  std::vector<EmploymentMonth> employment;
  std::vector<EducationEvent> events;
  std::vector<StudentIat> student_iat;
  std::vector<Reject> rejects;
};

// Each loader validates domains row by row; failing rows become rejects.
// Duplicate keys throw DuplicateKeyError naming the offending tuples.
std::vector<StudentRecord> load_students(const std::filesystem::path& path, const TableSchema& schema,
                                         char delimiter, std::vector<Reject>& rejects);
std::vector<ScoreObservation> load_scores(const std::filesystem::path& path, const TableSchema& schema,
                                          char delimiter, std::vector<Reject>& rejects);
std::vector<TeacherRecord> load_teachers(const std::filesystem::path& path, const TableSchema& schema,
                                         char delimiter, std::vector<Reject>& rejects);
std::vector<EmploymentMonth> load_employment(const std::filesystem::path& path, const TableSchema& schema,
                                             char delimiter, std::vector<Reject>& rejects);
std::vector<EducationEvent> load_events(const std::filesystem::path& path, const TableSchema& schema,
                                        char delimiter, std::vector<Reject>& rejects);
std::vector<StudentIat> load_student_iat(const std::filesystem::path& path, const TableSchema& schema,
                                         char delimiter, std::vector<Reject>& rejects);

// Loads every table of the schema whose file exists in dir; fills
// cohort_projected_grad on student rows.
Panel load_panel(const std::filesystem::path& dir, const PanelSchema& schema = PanelSchema::defaults());

void write_students(const std::filesystem::path& path, std::span<const StudentRecord> rows, char delimiter = ',');
void write_scores(const std::filesystem::path& path, std::span<const ScoreObservation> rows, char delimiter = ',');
void write_teachers(const std::filesystem::path& path, std::span<const TeacherRecord> rows, char delimiter = ',');
void write_employment(const std::filesystem::path& path, std::span<const EmploymentMonth> rows, char delimiter = ',');
void write_events(const std::filesystem::path& path, std::span<const EducationEvent> rows, char delimiter = ',');
void write_student_iat(const std::filesystem::path& path, std::span<const StudentIat> rows, char delimiter = ',');
void write_rejects(const std::filesystem::path& path, std::span<const Reject> rows, char delimiter = ',');
void write_panel(const std::filesystem::path& dir, const Panel& panel, const PanelSchema& schema = PanelSchema::defaults());

// z-scores teacher and blind scores within (school_year, subject) cells and
// each lag within (school_year, lag subject) cells, population SD.
std::vector<ScoreObservation> standardize_scores(std::vector<ScoreObservation> obs);

// Earliest enrollment (year, grade) extrapolated to grade-11 completion.
int projected_graduation_year(std::span<const std::pair<int, int>> year_grade);

// student_id -> projected graduation year over all enrollment rows.
std::map<std::string, int> projected_graduation_years(std::span<const StudentRecord> students);

struct DominantEmployer {
  std::array<std::optional<std::string>, 4> quarterly;
  std::optional<std::string> annual;  // empty: no employer that year
};

// Quarter dominance by earnings; the year goes to the employer dominating the
// most quarters, then the larger annual total, then the smaller id.
DominantEmployer dominant_annual_employer(std::span<const EmploymentMonth> months, std::string_view worker, int year);

// Labor outcomes per age bin measured from the projected graduation year.
// A worker counts as formally employed in a bin when the dominant annual
// employer pays positive formal earnings for spell_window consecutive months.
std::vector<LaborOutcome> build_labor_outcomes(std::span<const EmploymentMonth> worker_months, int projected_grad,
                                               std::span<const AgeBin> bins, int spell_window = 1);

// cohort (projected graduation year) -> number of years after projection
// that still count as "ever".
using EverHorizon = std::map<int, int>;

OutcomeRecord build_outcomes(const std::string& student_id, int projected_grad,
                             std::span<const EducationEvent> student_events,
                             std::span<const EmploymentMonth> worker_months, const EverHorizon& horizon,
                             std::span<const AgeBin> bins, int spell_window = 1);

}  // namespace gradegap
