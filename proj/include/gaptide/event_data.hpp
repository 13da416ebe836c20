#pragma once

// Cohorts of multitype recurrent-event histories on the gap-time scale,
// long-format CSV ingestion/export, and invariant checking.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace gaptide {

/// Event-type code used throughout: 0 is the terminal event, 1..Q recurrent.
inline constexpr int kTerminal = 0;

using CovariateVector = std::vector<double>;

/// Completed gaps of one recurrent type plus the right-censored residual.
struct GapSequence {
  std::vector<double> completed;
  double residual = 0.0;

  double completed_sum() const {
    double s = 0.0;
    for (double g : completed) s += g;
    return s;
  }
  std::size_t count() const { return completed.size(); }
};

struct SubjectHistory {
  std::string subject_id;
  CovariateVector x;
  double tau = 0.0;
  std::optional<double> terminal_time;
  bool terminal_observed = false;
  std::vector<GapSequence> gaps;  // gaps[q - 1] for q = 1..Q

  /// min(tau, terminal time if observed): end of recurrent-event follow-up.
  double window() const {
    if (terminal_observed && terminal_time) return std::min(tau, *terminal_time);
    return tau;
  }
  const GapSequence& type(int q) const { return gaps.at(static_cast<std::size_t>(q - 1)); }
  std::size_t recurrent_count() const {
    std::size_t n = 0;
    for (const auto& g : gaps) n += g.count();
    return n;
  }
};

struct Cohort {
  std::vector<SubjectHistory> subjects;
  int q_count = 1;
  std::size_t p = 0;

  std::size_t size() const { return subjects.size(); }
};

struct Violation {
  std::string subject_id;
  int event_type = -1;  // -1 when the rule is not type-specific
  std::string rule;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(std::vector<Violation> violations)
      : std::runtime_error(summarize(violations)), violations_(std::move(violations)) {}
  const std::vector<Violation>& violations() const { return violations_; }

 private:
  static std::string summarize(const std::vector<Violation>& v) {
    std::ostringstream os;
    os << v.size() << " cohort violation(s)";
    if (!v.empty()) os << "; first: subject " << v.front().subject_id << ": " << v.front().rule;
    return os.str();
  }
  std::vector<Violation> violations_;
};

enum class TimeScale { calendar, gap };

struct CsvSchema {
  TimeScale time_scale = TimeScale::calendar;
  std::optional<int> q_count;  // defaults to the largest event type seen (at least 1)
};

namespace detail {

inline bool close_to(double a, double b) {
  return std::abs(a - b) <= 8.0 * std::numeric_limits<double>::epsilon() * std::max({1.0, std::abs(a), std::abs(b)});
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(field);
      field.clear();
    } else if (ch != '\r') {
      field.push_back(ch);
    }
  }
  out.push_back(field);
  for (auto& f : out) {
    const auto b = f.find_first_not_of(" \t");
    const auto e = f.find_last_not_of(" \t");
    f = (b == std::string::npos) ? std::string() : f.substr(b, e - b + 1);
  }
  return out;
}

inline double parse_number(const std::string& field, std::size_t line, const char* what) {
  if (field.empty()) throw ParseError(line, std::string("missing ") + what);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(field, &used);
  } catch (const std::exception&) {
    throw ParseError(line, std::string("malformed ") + what + " '" + field + "'");
  }
  if (used != field.size() || !std::isfinite(v))
    throw ParseError(line, std::string("malformed ") + what + " '" + field + "'");
  return v;
}

}  // namespace detail

/// Builds a subject from calendar event times, per recurrent type.
/// `calendar[q - 1]` holds the type-q event times in any order.
inline SubjectHistory subject_from_calendar(std::string id, CovariateVector x, double tau,
                                            std::optional<double> terminal_time,
                                            std::vector<std::vector<double>> calendar) {
  SubjectHistory s;
  s.subject_id = std::move(id);
  s.x = std::move(x);
  s.tau = tau;
  s.terminal_time = terminal_time;
  s.terminal_observed = terminal_time && *terminal_time <= tau;
  const double window = s.window();
  s.gaps.resize(calendar.size());
  for (std::size_t q = 0; q < calendar.size(); ++q) {
    auto& times = calendar[q];
    std::sort(times.begin(), times.end());
    double prev = 0.0;
    for (double t : times) {
      s.gaps[q].completed.push_back(t - prev);
      prev = t;
    }
    s.gaps[q].residual = window - s.gaps[q].completed_sum();
  }
  return s;
}

/// Builds a subject directly from gap sequences (gap-scale input).
inline SubjectHistory subject_from_gaps(std::string id, CovariateVector x, double tau,
                                        std::optional<double> terminal_time,
                                        std::vector<std::vector<double>> gaps) {
  SubjectHistory s;
  s.subject_id = std::move(id);
  s.x = std::move(x);
  s.tau = tau;
  s.terminal_time = terminal_time;
  s.terminal_observed = terminal_time && *terminal_time <= tau;
  const double window = s.window();
  s.gaps.resize(gaps.size());
  for (std::size_t q = 0; q < gaps.size(); ++q) {
    s.gaps[q].completed = std::move(gaps[q]);
    s.gaps[q].residual = window - s.gaps[q].completed_sum();
  }
  return s;
}

/// Lists every invariant violation; an empty result means the cohort is valid.
inline std::vector<Violation> validate_cohort(const Cohort& c) {
  std::vector<Violation> out;
  std::unordered_set<std::string> seen;
  for (const auto& s : c.subjects) {
    auto add = [&](int type, std::string rule) { out.push_back({s.subject_id, type, std::move(rule)}); };
    if (!seen.insert(s.subject_id).second) add(-1, "duplicate subject id");
    if (s.x.size() != c.p) add(-1, "covariate length differs from cohort dimension");
    for (double v : s.x)
      if (!std::isfinite(v)) {
        add(-1, "non-finite covariate");
        break;
      }
    if (!(s.tau > 0.0) || !std::isfinite(s.tau)) add(-1, "observation window tau must be positive");
    if (s.terminal_time) {
      if (!(*s.terminal_time > 0.0)) add(kTerminal, "terminal time must be positive");
      if (s.terminal_observed != (*s.terminal_time <= s.tau))
        add(kTerminal, "terminal indicator inconsistent with terminal time and tau");
    } else if (s.terminal_observed) {
      add(kTerminal, "terminal indicator set without a terminal time");
    }
    if (static_cast<int>(s.gaps.size()) != c.q_count) {
      add(-1, "gap lists do not cover every recurrent type");
      continue;
    }
    const double window = s.window();
    for (int q = 1; q <= c.q_count; ++q) {
      const auto& g = s.type(q);
      for (double v : g.completed)
        if (!(v > 0.0)) {
          add(q, "gap times must be strictly positive");
          break;
        }
      const double sum = g.completed_sum();
      if (sum > window && !detail::close_to(sum, window)) add(q, "gap-sum exceeds observation window");
      if (g.residual < 0.0 && !detail::close_to(g.residual, 0.0)) add(q, "negative residual gap");
      if (!detail::close_to(sum + g.residual, window)) add(q, "residual gap inconsistent with observation window");
    }
  }
  return out;
}

/// Parses the long-format event file from a stream.
///
/// Header: subject_id,row_kind,event_type,time,tau,x1,...,xp. Event rows carry
/// event_type (0 terminal, 1..Q recurrent) and time; the single censor row per
/// subject carries tau and the covariates. Fields a row kind does not use are
/// ignored.
inline Cohort parse_events_csv(std::istream& in, const CsvSchema& schema = {}) {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    header = detail::split_csv_line(line);
    break;
  }
  static const std::vector<std::string> fixed = {"subject_id", "row_kind", "event_type", "time", "tau"};
  if (header.size() < fixed.size() || !std::equal(fixed.begin(), fixed.end(), header.begin()))
    throw ParseError(line_no == 0 ? 1 : line_no, "header must start with subject_id,row_kind,event_type,time,tau");
  const std::size_t p = header.size() - fixed.size();
  for (std::size_t k = 0; k < p; ++k)
    if (header[fixed.size() + k].empty()) throw ParseError(line_no, "empty covariate column name");

  struct Pending {
    std::size_t first_line = 0;
    std::optional<double> tau;
    CovariateVector x;
    std::optional<double> terminal;
    std::size_t terminal_line = 0;
    std::map<int, std::vector<std::pair<double, std::size_t>>> events;  // type -> (time, line)
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, Pending> pending;
  int max_type = 0;

  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != header.size())
      throw ParseError(line_no, "expected " + std::to_string(header.size()) + " fields, found " + std::to_string(f.size()));
    const std::string& id = f[0];
    if (id.empty()) throw ParseError(line_no, "missing subject_id");
    auto [it, fresh] = pending.try_emplace(id);
    if (fresh) {
      order.push_back(id);
      it->second.first_line = line_no;
    }
    Pending& s = it->second;
    if (f[1] == "censor") {
      if (s.tau) throw ParseError(line_no, "second censor row for subject " + id);
      s.tau = detail::parse_number(f[4], line_no, "tau");
      if (*s.tau < 0.0) throw ParseError(line_no, "negative tau");
      s.x.resize(p);
      for (std::size_t k = 0; k < p; ++k) s.x[k] = detail::parse_number(f[5 + k], line_no, ("covariate " + header[5 + k]).c_str());
    } else if (f[1] == "event") {
      const double type_d = detail::parse_number(f[2], line_no, "event_type");
      if (type_d != std::floor(type_d) || type_d < 0.0) throw ParseError(line_no, "event_type must be a nonnegative integer");
      const int type = static_cast<int>(type_d);
      const double t = detail::parse_number(f[3], line_no, "time");
      if (t < 0.0) throw ParseError(line_no, "negative event time");
      if (type == kTerminal) {
        if (s.terminal) throw ParseError(line_no, "second terminal event for subject " + id);
        s.terminal = t;
        s.terminal_line = line_no;
      } else {
        s.events[type].emplace_back(t, line_no);
        max_type = std::max(max_type, type);
      }
    } else {
      throw ParseError(line_no, "row_kind must be 'event' or 'censor', found '" + f[1] + "'");
    }
  }

  const int q_count = schema.q_count.value_or(std::max(1, max_type));
  if (max_type > q_count)
    throw ParseError(line_no, "event type " + std::to_string(max_type) + " exceeds declared type count");

  Cohort cohort;
  cohort.q_count = q_count;
  cohort.p = p;
  std::vector<Violation> problems;
  for (const auto& id : order) {
    Pending& s = pending.at(id);
    if (!s.tau) {
      problems.push_back({id, -1, "missing censor row (tau and covariates)"});
      continue;
    }
    if (!(*s.tau > 0.0)) {
      problems.push_back({id, -1, "observation window tau must be positive"});
      continue;
    }
    if (s.terminal && *s.terminal > *s.tau) {
      problems.push_back({id, kTerminal, "terminal event after censoring time"});
      continue;
    }
    if (s.terminal && !(*s.terminal > 0.0)) {
      problems.push_back({id, kTerminal, "terminal time must be positive"});
      continue;
    }
    std::vector<std::vector<double>> per_type(static_cast<std::size_t>(q_count));
    for (auto& [type, rows] : s.events) {
      auto& dst = per_type[static_cast<std::size_t>(type - 1)];
      for (auto& [t, ln] : rows) dst.push_back(t);
    }
    SubjectHistory h = schema.time_scale == TimeScale::calendar
                           ? subject_from_calendar(id, s.x, *s.tau, s.terminal, std::move(per_type))
                           : subject_from_gaps(id, s.x, *s.tau, s.terminal, std::move(per_type));
    const double window = h.window();
    bool ok = true;
    for (int q = 1; q <= q_count && ok; ++q) {
      const auto& g = h.type(q);
      for (double v : g.completed)
        if (!(v > 0.0)) {
          problems.push_back({id, q, "zero or negative gap time (tied or time-zero events)"});
          ok = false;
          break;
        }
      if (ok && g.completed_sum() > window && !detail::close_to(g.completed_sum(), window)) {
        problems.push_back({id, q, "event after censoring"});
        ok = false;
      }
    }
    if (ok) cohort.subjects.push_back(std::move(h));
  }
  if (!problems.empty()) throw ValidationError(std::move(problems));
  auto post = validate_cohort(cohort);
  if (!post.empty()) throw ValidationError(std::move(post));
  return cohort;
}

inline Cohort parse_events_csv(const std::string& path, const CsvSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return parse_events_csv(in, schema);
}

/// Writes the cohort in the long format accepted by parse_events_csv.
inline void write_events_csv(std::ostream& out, const Cohort& c, TimeScale scale = TimeScale::calendar) {
  out << std::setprecision(17);
  out << "subject_id,row_kind,event_type,time,tau";
  for (std::size_t k = 0; k < c.p; ++k) out << ",x" << (k + 1);
  out << '\n';
  const std::string blanks(c.p, ',');
  for (const auto& s : c.subjects) {
    for (int q = 1; q <= c.q_count; ++q) {
      double clock = 0.0;
      for (double g : s.type(q).completed) {
        clock += g;
        out << s.subject_id << ",event," << q << ',' << (scale == TimeScale::calendar ? clock : g) << ',' << blanks << '\n';
      }
    }
    if (s.terminal_observed) out << s.subject_id << ",event,0," << *s.terminal_time << ',' << blanks << '\n';
    out << s.subject_id << ",censor,,," << s.tau;
    for (double v : s.x) out << ',' << v;
    out << '\n';
  }
}

inline void write_events_csv(const std::string& path, const Cohort& c, TimeScale scale = TimeScale::calendar) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_events_csv(out, c, scale);
}

}  // namespace gaptide
