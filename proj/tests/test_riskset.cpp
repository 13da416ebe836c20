#include <gtest/gtest.h>

#include <random>

#include "gaptide/riskset.hpp"
#include "oracles.hpp"

using namespace gaptide;

TEST(Grid, StepGridCounts) {
  const auto g = build_grid(StepGrid{0.03, 3.0});
  EXPECT_EQ(g.cuts().size(), 101u);
  EXPECT_EQ(g.intervals(), 100u);
  EXPECT_DOUBLE_EQ(g.horizon(), 3.0);
}

TEST(Grid, ExplicitAndDataDriven) {
  const auto e = build_grid(ExplicitGrid{{0.0, 1.0}});
  EXPECT_EQ(e.intervals(), 1u);
  Cohort c;
  c.q_count = 1;
  c.subjects.push_back(subject_from_gaps("a", {}, 2.0, std::nullopt, {{0.3, 0.3, 0.7}}));
  const auto d = build_grid(DataGrid{}, &c);
  EXPECT_EQ(d.cuts(), (std::vector<double>{0.0, 0.3, 0.7}));
  EXPECT_THROW(PartitionGrid({0.0, 0.5, 0.5}), std::invalid_argument);
  EXPECT_THROW(PartitionGrid({0.1, 0.5}), std::invalid_argument);
  EXPECT_THROW(build_grid(DataGrid{}), std::invalid_argument);
}

TEST(AtRisk, GapExamples) {
  const auto s = subject_from_gaps("a", {}, 1.5, std::nullopt, {{0.5, 0.7}});
  EXPECT_NEAR(s.type(1).residual, 0.3, 1e-12);
  EXPECT_EQ(gap_at_risk(s, 1, 0.4), 2);
  EXPECT_EQ(gap_at_risk(s, 1, 10.0), 0);
  EXPECT_EQ(gap_at_risk(s, 1, 1e-12), 3);
}

TEST(AtRisk, TerminalExamples) {
  const auto s = subject_from_gaps("a", {}, 1.2, 0.8, {{}});
  EXPECT_EQ(terminal_at_risk(s, 0.5), 1);
  EXPECT_EQ(terminal_at_risk(s, 0.9), 0);
  const auto c = subject_from_gaps("b", {}, 1.2, std::nullopt, {{}});
  EXPECT_EQ(terminal_at_risk(c, 1.2), 1);
}

TEST(Summary, HandExample) {
  Cohort c;
  c.q_count = 1;
  c.subjects.push_back(subject_from_gaps("a", {}, 1.0, std::nullopt, {{0.5}}));
  const auto rs = summarize(c, PartitionGrid({0.0, 0.5, 1.0}));
  EXPECT_EQ(rs.n_inc(1, 0, 1), 1);
  EXPECT_EQ(rs.n_inc(1, 0, 2), 0);
  EXPECT_EQ(rs.y_at(1, 0, 1), 2);
  EXPECT_EQ(rs.y_at(1, 0, 2), 0);
  EXPECT_EQ(rs.y_at(0, 0, 2), 1);
}

TEST(Summary, EmptyCohort) {
  Cohort c;
  c.q_count = 2;
  const auto rs = summarize(c, build_grid(StepGrid{0.5, 1.0}));
  EXPECT_EQ(rs.subjects(), 0u);
  for (int k = 0; k <= 2; ++k)
    for (double v : rs.process(k).events_per_interval) EXPECT_EQ(v, 0.0);
}

TEST(Summary, EventBeyondHorizonThrows) {
  Cohort c;
  c.q_count = 1;
  c.subjects.push_back(subject_from_gaps("a", {}, 3.0, std::nullopt, {{2.5}}));
  EXPECT_THROW(summarize(c, PartitionGrid({0.0, 1.0, 2.0})), std::out_of_range);
}

// Exhaustive agreement with brute-force binning on small random cohorts
// (n <= 5, K <= 3, M <= 6), including gaps that tie with cut points.
TEST(Summary, MatchesBruteForce) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> m_dist(1, 6);
  for (int trial = 0; trial < 2000; ++trial) {
    const Cohort c = oracle::random_cohort(rng, 5, 3, 1, 3);
    auto cuts = oracle::random_cuts(rng, m_dist(rng));
    if (cuts.back() < 3.0 - 1e-9) cuts.back() = 3.0;
    if (cuts.size() > 2 && cuts[cuts.size() - 2] >= cuts.back()) continue;
    const auto rs = summarize(c, PartitionGrid(cuts));
    for (std::size_t i = 0; i < c.size(); ++i) {
      const auto& s = c.subjects[i];
      for (std::size_t j = 1; j < cuts.size(); ++j) {
        for (int q = 1; q <= c.q_count; ++q) {
          ASSERT_EQ(rs.n_inc(q, i, j), oracle::bin_count(s.type(q).completed, cuts, j));
          ASSERT_EQ(rs.y_at(q, i, j), oracle::at_risk_count(oracle::exposures_of(s, q), cuts[j]));
          ASSERT_EQ(rs.y_at(q, i, j), gap_at_risk(s, q, cuts[j]));
        }
        const std::vector<double> term = s.terminal_observed ? std::vector<double>{*s.terminal_time} : std::vector<double>{};
        ASSERT_EQ(rs.n_inc(0, i, j), oracle::bin_count(term, cuts, j));
        ASSERT_EQ(rs.y_at(0, i, j), oracle::at_risk_count({s.window()}, cuts[j]));
      }
      for (int q = 1; q <= c.q_count; ++q) {
        int total = 0;
        for (std::size_t j = 1; j < cuts.size(); ++j) total += rs.n_inc(q, i, j);
        ASSERT_EQ(total, static_cast<int>(s.type(q).count()));
      }
    }
  }
}

TEST(Summary, CsvDumpShape) {
  Cohort c;
  c.q_count = 1;
  c.subjects.push_back(subject_from_gaps("a", {}, 1.0, std::nullopt, {{0.5}}));
  const auto rs = summarize(c, PartitionGrid({0.0, 0.5, 1.0}));
  std::ostringstream os;
  rs.write_csv(os);
  EXPECT_EQ(os.str(), "q,i,j,n_inc,y_at\n0,1,1,0,1\n0,1,2,0,1\n1,1,1,1,2\n1,1,2,0,0\n");
}
