#pragma once

// Partition grids and gap-time counting/at-risk summaries.
//
// Intervals are right-closed, (t_(j-1), t_(j)], j = 1..M. At-risk counts are
// evaluated at the right endpoint t_(j) with a closed comparison, so a gap
// tied with a cut is both an event in that interval and at risk at that cut.
// Mass beyond the last cut is dropped.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <variant>
#include <vector>

#include "gaptide/event_data.hpp"

namespace gaptide {

class PartitionGrid {
 public:
  PartitionGrid() = default;
  explicit PartitionGrid(std::vector<double> cuts) : cuts_(std::move(cuts)) {
    if (cuts_.size() < 2) throw std::invalid_argument("partition grid needs at least one interval");
    if (cuts_.front() != 0.0) throw std::invalid_argument("partition grid must start at 0");
    for (std::size_t j = 1; j < cuts_.size(); ++j)
      if (!(cuts_[j] > cuts_[j - 1])) throw std::invalid_argument("partition cuts must be strictly increasing");
  }

  const std::vector<double>& cuts() const { return cuts_; }
  std::size_t intervals() const { return cuts_.size() - 1; }
  double horizon() const { return cuts_.back(); }
  double cut(std::size_t j) const { return cuts_[j]; }

  /// Interval j in 1..M with t in (t_(j-1), t_(j)]; 0 for t <= 0, M + 1 beyond the horizon.
  std::size_t interval_of(double t) const {
    if (t <= 0.0) return 0;
    return static_cast<std::size_t>(std::lower_bound(cuts_.begin(), cuts_.end(), t) - cuts_.begin());
  }

  /// Number of cuts t_(j), j >= 1, with t_(j) <= g: the cuts at which a gap g is at risk.
  std::size_t depth_of(double g) const {
    return static_cast<std::size_t>(std::upper_bound(cuts_.begin(), cuts_.end(), g) - cuts_.begin()) - 1;
  }

 private:
  std::vector<double> cuts_{0.0, 1.0};
};

struct StepGrid {
  double step = 0.03;
  double horizon = 3.0;
};
struct ExplicitGrid {
  std::vector<double> cuts;
};
/// Cuts at the pooled distinct event gap times (recurrent gaps and observed terminal times).
struct DataGrid {};

using GridSpec = std::variant<StepGrid, ExplicitGrid, DataGrid>;

namespace detail {

inline PartitionGrid step_grid(const StepGrid& s) {
  if (!(s.step > 0.0) || !(s.horizon > 0.0)) throw std::invalid_argument("grid step and horizon must be positive");
  const double ratio = s.horizon / s.step;
  const auto whole = static_cast<std::size_t>(std::llround(ratio));
  std::vector<double> cuts;
  if (whole >= 1 && std::abs(ratio - static_cast<double>(whole)) <= 1e-9 * ratio) {
    cuts.reserve(whole + 1);
    for (std::size_t j = 0; j < whole; ++j) cuts.push_back(static_cast<double>(j) * s.step);
    cuts.push_back(s.horizon);
  } else {
    const auto n = static_cast<std::size_t>(std::floor(ratio));
    for (std::size_t j = 0; j <= n; ++j) cuts.push_back(static_cast<double>(j) * s.step);
    if (cuts.back() < s.horizon) cuts.push_back(s.horizon);
  }
  return PartitionGrid(std::move(cuts));
}

inline PartitionGrid data_grid(const Cohort& c) {
  std::vector<double> times;
  double longest = 0.0;
  for (const auto& s : c.subjects) {
    for (const auto& g : s.gaps) times.insert(times.end(), g.completed.begin(), g.completed.end());
    if (s.terminal_observed) times.push_back(*s.terminal_time);
    longest = std::max(longest, s.window());
  }
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());
  std::vector<double> cuts{0.0};
  for (double t : times)
    if (t > 0.0) cuts.push_back(t);
  if (cuts.size() == 1) cuts.push_back(longest > 0.0 ? longest : 1.0);
  return PartitionGrid(std::move(cuts));
}

}  // namespace detail

/// Builds a grid. The cohort is only consulted for DataGrid.
inline PartitionGrid build_grid(const GridSpec& spec, const Cohort* cohort = nullptr) {
  if (const auto* s = std::get_if<StepGrid>(&spec)) return detail::step_grid(*s);
  if (const auto* e = std::get_if<ExplicitGrid>(&spec)) return PartitionGrid(e->cuts);
  if (!cohort) throw std::invalid_argument("data-driven grid requires a cohort");
  return detail::data_grid(*cohort);
}

/// Gap-time at-risk count Y_i(u) for recurrent type q: completed gaps and the
/// residual that are >= u.
inline int gap_at_risk(const SubjectHistory& s, int q, double u) {
  const auto& g = s.type(q);
  int n = 0;
  for (double v : g.completed) n += (v >= u);
  n += (g.residual >= u);
  return n;
}

/// Terminal-event at-risk indicator I{min(tau, T0) >= u}.
inline int terminal_at_risk(const SubjectHistory& s, double u) { return s.window() >= u ? 1 : 0; }

/// Compact counting/at-risk data for one process (a recurrent type or the
/// terminal event), stored per subject in CSR layout.
struct ProcessRisk {
  std::vector<std::size_t> event_offset;     // size n + 1
  std::vector<std::uint32_t> event_interval;  // interval index 1..M of each event
  std::vector<std::size_t> exposure_offset;  // size n + 1
  std::vector<std::uint32_t> exposure_depth;  // cuts at which each gap (or residual) is at risk
  std::vector<double> events_per_interval;   // sum_i n_inc, index j - 1
  std::vector<double> subject_events;        // N_ki

  std::size_t events_of(std::size_t i) const { return event_offset[i + 1] - event_offset[i]; }
};

/// Counting increments and at-risk counts on a grid for every process.
/// Process index 0 is the terminal event, 1..Q the recurrent types.
class RiskSummary {
 public:
  RiskSummary() = default;
  RiskSummary(PartitionGrid grid, std::size_t n, std::size_t p, int q_count)
      : grid_(std::move(grid)), n_(n), p_(p), q_count_(q_count), x_(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p))) {
    processes_.resize(static_cast<std::size_t>(q_count) + 1);
  }

  const PartitionGrid& grid() const { return grid_; }
  std::size_t subjects() const { return n_; }
  std::size_t covariates() const { return p_; }
  int q_count() const { return q_count_; }
  std::size_t process_count() const { return processes_.size(); }
  std::size_t intervals() const { return grid_.intervals(); }
  const Eigen::MatrixXd& x() const { return x_; }
  Eigen::MatrixXd& x() { return x_; }
  const ProcessRisk& process(int k) const { return processes_[static_cast<std::size_t>(k)]; }
  ProcessRisk& process(int k) { return processes_[static_cast<std::size_t>(k)]; }

  /// n_inc for process k, subject i, interval j (1-based).
  int n_inc(int k, std::size_t i, std::size_t j) const {
    const auto& pr = process(k);
    int n = 0;
    for (auto e = pr.event_offset[i]; e < pr.event_offset[i + 1]; ++e) n += (pr.event_interval[e] == j);
    return n;
  }
  /// y_at for process k, subject i, cut j (1-based).
  int y_at(int k, std::size_t i, std::size_t j) const {
    const auto& pr = process(k);
    int n = 0;
    for (auto e = pr.exposure_offset[i]; e < pr.exposure_offset[i + 1]; ++e) n += (pr.exposure_depth[e] >= j);
    return n;
  }
  /// N_.i + N_0i: all events of subject i.
  double total_events(std::size_t i) const {
    double s = 0.0;
    for (const auto& pr : processes_) s += pr.subject_events[i];
    return s;
  }

  /// Debug dump `q,i,j,n_inc,y_at` (q = 0 is the terminal event; i and j 1-based).
  void write_csv(std::ostream& out) const {
    out << "q,i,j,n_inc,y_at\n";
    for (int k = 0; k <= q_count_; ++k)
      for (std::size_t i = 0; i < n_; ++i)
        for (std::size_t j = 1; j <= intervals(); ++j)
          out << k << ',' << (i + 1) << ',' << j << ',' << n_inc(k, i, j) << ',' << y_at(k, i, j) << '\n';
  }

 private:
  PartitionGrid grid_;
  std::size_t n_ = 0;
  std::size_t p_ = 0;
  int q_count_ = 1;
  Eigen::MatrixXd x_;
  std::vector<ProcessRisk> processes_;
};

/// Bins every gap of the cohort on the grid. Throws when an event lies beyond
/// the grid horizon.
inline RiskSummary summarize(const Cohort& c, const PartitionGrid& grid) {
  const std::size_t n = c.size();
  const std::size_t m = grid.intervals();
  RiskSummary rs(grid, n, c.p, c.q_count);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c.p; ++k) rs.x()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = c.subjects[i].x[k];

  auto place_event = [&](ProcessRisk& pr, double t, const SubjectHistory& s) {
    const std::size_t j = grid.interval_of(t);
    if (j == 0 || j > m)
      throw std::out_of_range("event at gap time " + std::to_string(t) + " of subject " + s.subject_id +
                              " lies outside the grid (0, " + std::to_string(grid.horizon()) + "]");
    pr.event_interval.push_back(static_cast<std::uint32_t>(j));
    pr.events_per_interval[j - 1] += 1.0;
  };

  for (int k = 0; k <= c.q_count; ++k) {
    ProcessRisk& pr = rs.process(k);
    pr.event_offset.assign(1, 0);
    pr.exposure_offset.assign(1, 0);
    pr.events_per_interval.assign(m, 0.0);
    pr.subject_events.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = c.subjects[i];
      if (k == kTerminal) {
        if (s.terminal_observed) place_event(pr, *s.terminal_time, s);
        pr.exposure_depth.push_back(static_cast<std::uint32_t>(grid.depth_of(s.window())));
      } else {
        const auto& g = s.type(k);
        for (double v : g.completed) {
          place_event(pr, v, s);
          pr.exposure_depth.push_back(static_cast<std::uint32_t>(grid.depth_of(v)));
        }
        pr.exposure_depth.push_back(static_cast<std::uint32_t>(grid.depth_of(g.residual)));
      }
      pr.event_offset.push_back(pr.event_interval.size());
      pr.exposure_offset.push_back(pr.exposure_depth.size());
      pr.subject_events[i] = static_cast<double>(pr.events_of(i));
    }
  }
  return rs;
}

}  // namespace gaptide
