#include <gtest/gtest.h>

#include <boost/math/distributions/gamma.hpp>

#include <cmath>
#include <random>

#include "gaptide/model_core.hpp"
#include "oracles.hpp"

using namespace gaptide;

namespace {

ModelState blank_state(const RiskSummary& rs, double inc = 0.0) {
  ModelState st;
  st.increments.assign(rs.process_count(), std::vector<double>(rs.intervals(), inc));
  st.w.assign(rs.subjects(), 1.0);
  st.nu = 2.0;
  st.beta.assign(rs.process_count(), Eigen::VectorXd::Zero(static_cast<Eigen::Index>(rs.covariates())));
  return st;
}

Cohort one_type(std::vector<SubjectHistory> subjects, std::size_t p = 0) {
  Cohort c;
  c.q_count = 1;
  c.p = p;
  c.subjects = std::move(subjects);
  return c;
}

RiskSummary random_summary(std::mt19937_64& rng, std::size_t p) {
  const Cohort c = oracle::random_cohort(rng, 12, 3, p, 4);
  return summarize(c, build_grid(DataGrid{}, &c));
}

}  // namespace

TEST(Exposure, HandExample) {
  const auto c = one_type({subject_from_gaps("a", {}, 2.5, std::nullopt, {{}})});
  const auto rs = summarize(c, PartitionGrid({0.0, 1.0, 2.0}));
  ModelState st = blank_state(rs);
  st.increments[1] = {0.1, 0.2};
  EXPECT_NEAR(exposure_r(rs, st, 0, 1), 0.3, 1e-15);
  st.increments[1] = {0.0, 0.0};
  EXPECT_EQ(exposure_r(rs, st, 0, 1), 0.0);
}

TEST(CompleteLikelihood, HandExample) {
  const auto empty = one_type({});
  const auto rs0 = summarize(empty, PartitionGrid({0.0, 1.0}));
  EXPECT_EQ(log_complete_likelihood(rs0, blank_state(rs0)), 0.0);

  const auto c = one_type({subject_from_gaps("a", {}, 1.0, std::nullopt, {{1.0}})});
  const auto rs = summarize(c, PartitionGrid({0.0, 1.0}));
  ModelState st = blank_state(rs);
  st.increments[1] = {0.2};
  EXPECT_NEAR(log_complete_likelihood(rs, st), std::log(0.2) - 0.2, 1e-14);
  st.increments[1] = {0.0};
  EXPECT_EQ(log_complete_likelihood(rs, st), -INFINITY);
}

TEST(LambdaPosterior, NoDataReturnsPrior) {
  const auto rs = summarize(one_type({}), PartitionGrid({0.0, 1.0}));
  GammaProcessPrior prior{0.1, {0.05}};
  const auto post = lambda_posterior_all(rs, {}, Eigen::VectorXd(), prior, 1);
  EXPECT_NEAR(post[0].shape, 0.005, 1e-15);
  EXPECT_NEAR(post[0].rate, 0.1, 1e-15);
  EXPECT_NEAR(post[0].mean(), 0.05, 1e-15);
}

TEST(LambdaPosterior, BreslowLimitAndUnitFrailty) {
  std::vector<SubjectHistory> subjects;
  for (int i = 0; i < 2; ++i) subjects.push_back(subject_from_gaps("e" + std::to_string(i), {}, 1.0, std::nullopt, {{1.0}}));
  for (int i = 0; i < 8; ++i) subjects.push_back(subject_from_gaps("c" + std::to_string(i), {}, 1.5, std::nullopt, {{}}));
  const auto rs = summarize(one_type(std::move(subjects)), PartitionGrid({0.0, 1.0}));
  ModelState st = blank_state(rs);
  GammaProcessPrior tiny{1e-12, {1.0}};
  const auto post = lambda_posterior_all(rs, st.w, st.beta[1], tiny, 1);
  EXPECT_NEAR(post[0].mean(), 0.2, 1e-10);
  GammaProcessPrior prior{0.3, {0.7}};
  EXPECT_NEAR(lambda_posterior_all(rs, st.w, st.beta[1], prior, 1)[0].rate, 0.3 + 10.0, 1e-12);
  const auto cum = cumulative_hazard_estimate(rs, st, tiny, 1, FrailtySource::current_draws);
  EXPECT_EQ(cum[0], 0.0);
  EXPECT_NEAR(cum[1], 0.2, 1e-10);
  EXPECT_EQ(step_value(rs.grid(), cum, 0.0), 0.0);
  EXPECT_EQ(step_value(rs.grid(), cum, 0.5), 0.0);
  EXPECT_NEAR(step_value(rs.grid(), cum, 1.0), 0.2, 1e-10);
}

// Weighted at-risk sums against a direct double loop.
TEST(LambdaPosterior, WeightedAtRiskMatchesDirectSum) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.2, 3.0);
  for (int trial = 0; trial < 100; ++trial) {
    const auto rs = random_summary(rng, 2);
    std::vector<double> wt(rs.subjects());
    for (auto& v : wt) v = u(rng);
    for (int k = 0; k <= rs.q_count(); ++k) {
      const auto got = weighted_at_risk(rs, k, wt);
      for (std::size_t j = 1; j <= rs.intervals(); ++j) {
        double want = 0.0;
        for (std::size_t i = 0; i < rs.subjects(); ++i) want += wt[i] * rs.y_at(k, i, j);
        ASSERT_NEAR(got[j - 1], want, 1e-12 * std::max(1.0, want));
      }
    }
  }
}

TEST(Frailty, PosteriorArithmetic) {
  const auto c = one_type({subject_from_gaps("a", {}, 3.0, std::nullopt, {{0.5, 0.5, 0.5}}),
                           subject_from_gaps("b", {}, 3.0, std::nullopt, {{}})});
  const auto rs = summarize(c, build_grid(DataGrid{}, &c));
  const auto m = frailty_posterior_means(rs, {1.5, 0.0}, 2.0);
  EXPECT_DOUBLE_EQ(m[0], 10.0 / 7.0);
  EXPECT_DOUBLE_EQ(m[1], 1.0);
  const auto big = frailty_posterior_means(rs, {1.5, 0.0}, 1e12);
  EXPECT_NEAR(big[0], 1.0, 1e-11);
  ModelState st = blank_state(rs);
  st.nu = 2.0;
  st.increments[1] = {0.5};
  const auto gp = frailty_posterior(rs, st, 0);
  // gaps 0.5 x3 plus residual 1.5: four exposures at the single cut 0.5
  EXPECT_DOUBLE_EQ(gp.shape, 5.0);
  EXPECT_DOUBLE_EQ(gp.rate, 4.0 * 0.5 + 2.0);
}

TEST(NuPosterior, NoDataEqualsPrior) {
  const NuPrior prior = GammaNuPrior{2.0, 2.0};
  for (double nu : {0.3, 1.0, 4.5})
    EXPECT_NEAR(nu_log_posterior({0.0}, {0.0}, nu, prior), log_prior_nu(prior, nu), 1e-12);
  EXPECT_EQ(nu_log_posterior({1.0}, {1.0}, -1.0, prior), -INFINITY);
}

// Marginal term against numerical integration of the Gamma-Poisson mixture.
TEST(NuPosterior, MarginalMatchesQuadrature) {
  const NuPrior flat = LogNormalNuPrior{0.0, 1.0};
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> nd(0, 6);
  std::uniform_real_distribution<double> rd(0.0, 4.0), nud(0.5, 6.0);
  for (int trial = 0; trial < 40; ++trial) {
    const double n = nd(rng), r = rd(rng), nu = nud(rng);
    const boost::math::gamma_distribution<double> g(nu, 1.0 / nu);
    // w = v^4 removes the w^(nu - 1) singularity at the origin
    auto f = [&](double v) {
      if (v <= 0.0) return 0.0;
      const double w = v * v * v * v;
      return std::pow(w, n) * std::exp(-r * w) * boost::math::pdf(g, w) * 4.0 * v * v * v;
    };
    const double integral = oracle::simpson(f, 0.0, std::pow(60.0, 0.25), 60000);
    const double got = nu_log_posterior({n}, {r}, nu, flat) - log_prior_nu(flat, nu);
    EXPECT_NEAR(got, std::log(integral), 1e-6) << "n=" << n << " r=" << r << " nu=" << nu;
  }
}

TEST(NuPrior, DensitiesIntegrateToOne) {
  for (NuPrior p : {NuPrior{GammaNuPrior{2.0, 2.0}}, NuPrior{LogNormalNuPrior{-0.2, 0.4}}}) {
    const double total = oracle::simpson([&](double v) { return v <= 0.0 ? 0.0 : std::exp(log_prior_nu(p, v)); }, 0.0, 60.0, 200000);
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(BetaPosterior, ZeroCovariatesGiveFlatDataTerm) {
  const auto c = one_type({subject_from_gaps("a", {0.0}, 2.0, std::nullopt, {{0.5}}),
                           subject_from_gaps("b", {0.0}, 2.0, std::nullopt, {{1.0}})}, 1);
  const auto rs = summarize(c, build_grid(DataGrid{}, &c));
  const BetaPrior prior = BetaPrior::isotropic(1, 1.0);
  const std::vector<double> w{1.0, 1.0}, base{0.7, 0.4};
  Eigen::VectorXd b0(1), b1(1);
  b0 << 0.0;
  b1 << 1.3;
  const double d0 = beta_log_posterior(rs, 1, b0, w, base, prior) - prior.log_density(b0);
  const double d1 = beta_log_posterior(rs, 1, b1, w, base, prior) - prior.log_density(b1);
  EXPECT_NEAR(d0, d1, 1e-14);
  const auto empty = summarize(one_type({}, 1), PartitionGrid({0.0, 1.0}));
  EXPECT_EQ(beta_log_posterior(empty, 1, b0, {}, {}, prior), 0.0);
}

// Analytic score against central differences at random points.
TEST(BetaPosterior, ScoreMatchesCentralDifferences) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> z(0.0, 0.7);
  std::uniform_real_distribution<double> u(0.3, 2.0);
  int checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto rs = random_summary(rng, 2);
    ModelState st = blank_state(rs);
    for (auto& v : st.w) v = u(rng);
    for (auto& inc : st.increments)
      for (auto& v : inc) v = 0.2 * u(rng);
    const BetaPrior prior = BetaPrior::isotropic(2, 1.5);
    for (int k = 0; k <= rs.q_count(); ++k) {
      Eigen::VectorXd beta(2);
      beta << z(rng), z(rng);
      const auto base = baseline_exposure(rs, k, st.increments[static_cast<std::size_t>(k)]);
      Eigen::VectorXd grad;
      beta_log_posterior(rs, k, beta, st.w, base, prior, &grad);
      for (Eigen::Index d = 0; d < 2; ++d) {
        auto f = [&](double v) {
          Eigen::VectorXd b = beta;
          b[d] = v;
          return beta_log_posterior(rs, k, b, st.w, base, prior);
        };
        const double fd = oracle::central_difference(f, beta[d], 1e-5);
        ASSERT_LT(std::abs(fd - grad[d]), 1e-6 * std::max(1.0, std::abs(grad[d])));
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 80);
}

TEST(BetaPrior, RejectsBadCovariance) {
  Eigen::MatrixXd bad(2, 2);
  bad << 1.0, 2.0, 2.0, 1.0;
  EXPECT_THROW(BetaPrior(Eigen::VectorXd::Zero(2), bad), std::invalid_argument);
  EXPECT_THROW(BetaPrior(Eigen::VectorXd::Zero(3), bad), std::invalid_argument);
}

TEST(Survival, Identities) {
  EXPECT_EQ(survival_estimate(0.0, 2.0), 1.0);
  EXPECT_NEAR(survival_estimate(1.0, 2.0), 4.0 / 9.0, 1e-15);
  for (double lam : {0.1, 1.0, 2.5}) EXPECT_NEAR(survival_estimate(lam, 1e6), std::exp(-lam), 1e-4);
  EXPECT_THROW(survival_estimate(-1.0, 2.0), std::domain_error);
  double prev = 1.0;
  for (int a = 0; a <= 100; ++a) {
    const double s = survival_estimate(0.05 * a, 0.7);
    EXPECT_GT(s, 0.0);
    EXPECT_LE(s, prev);
    prev = s;
  }
}

TEST(Survival, Conditional) {
  const auto cum = [](double) { return 0.5; };
  EXPECT_EQ(conditional_survival(0.0, cum, 1.0, Eigen::VectorXd::Zero(1), Eigen::VectorXd::Ones(1)), 1.0);
  EXPECT_NEAR(conditional_survival(1.0, cum, 1.0, Eigen::VectorXd::Zero(1), Eigen::VectorXd::Ones(1)), std::exp(-0.5), 1e-15);
}

TEST(Correlation, Identity) {
  EXPECT_DOUBLE_EQ(gap_correlation(4.0), 0.25);
  EXPECT_NEAR(gap_correlation(2.0 + 1e-9), 0.5, 1e-8);
  EXPECT_THROW(gap_correlation(2.0), std::domain_error);
}

TEST(GammaProcessPrior, FromCumulative) {
  const auto g = build_grid(StepGrid{0.5, 1.5});
  const auto p = GammaProcessPrior::from_cumulative(0.1, g, [](double t) { return t * t; });
  ASSERT_EQ(p.reference_increments.size(), 3u);
  EXPECT_NEAR(p.reference_increments[0], 0.25, 1e-15);
  EXPECT_NEAR(p.reference_increments[2], 2.25 - 1.0, 1e-15);
  EXPECT_THROW(GammaProcessPrior::from_cumulative(0.0, g, [](double t) { return t; }), std::invalid_argument);
  EXPECT_THROW(GammaProcessPrior::from_cumulative(0.1, g, [](double t) { return -t; }), std::invalid_argument);
}
