// Acceptance run: one PASS/FAIL line per criterion.
//
// Usage: acceptance [--only 1,2,...] [--expected-fail 10,11,...]
// The exit status is nonzero when a criterion fails that is not listed in
// --expected-fail. Listed criteria are still evaluated and reported as FAIL.

#include <CLI11.hpp>

#include <boost/math/special_functions/digamma.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "gaptide/gaptide.hpp"
#include "oracles.hpp"

using namespace gaptide;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Property suite

Outcome c1_breslow_recovery() {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(0.3, 2.5);
  std::normal_distribution<double> z(0.0, 0.5);
  double worst = 0.0;
  std::size_t cuts_checked = 0, cuts_beyond = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const Cohort c = oracle::random_cohort(rng, 10, 3, 2, 4);
    const auto rs = summarize(c, build_grid(DataGrid{}, &c));
    std::vector<double> w(rs.subjects());
    for (auto& v : w) v = u(rng);
    for (int k = 0; k <= rs.q_count(); ++k) {
      Eigen::VectorXd beta(2);
      beta << z(rng), z(rng);
      const GammaProcessPrior prior{1e-12, std::vector<double>(rs.intervals(), 1.0)};
      const auto post = lambda_posterior_all(rs, w, beta, prior, k);
      const auto bres = breslow_update(rs, k, beta, w);
      const auto risk = weighted_at_risk(rs, k, frailty_risk_weights(rs, w, beta));
      double cb = 0.0, cf = 0.0;
      for (std::size_t j = 0; j < bres.size(); ++j) {
        if (!(risk[j] > 0.0)) {
          ++cuts_beyond;
          continue;
        }
        cb += post[j].mean();
        cf += bres[j];
        ++cuts_checked;
        worst = std::max(worst, cf > 0.0 ? std::abs(cb - cf) / cf : std::abs(cb - cf));
      }
    }
  }
  return {worst < 1e-6, "max rel err " + sci(worst) + " over " + std::to_string(cuts_checked) + " cuts (" +
                            std::to_string(cuts_beyond) + " cuts past the last nonempty risk set skipped)"};
}

Outcome c2_conjugacy() {
  std::mt19937_64 rng(202);
  Cohort c = oracle::random_cohort(rng, 8, 2, 1, 4);
  while (c.size() < 4) c = oracle::random_cohort(rng, 8, 2, 1, 4);
  const auto rs = summarize(c, build_grid(StepGrid{0.25, 3.0}));
  ParamPriors priors;
  priors.nu = GammaNuPrior{2.0, 2.0};
  std::vector<GammaProcessPrior> gp;
  for (std::size_t k = 0; k < rs.process_count(); ++k) {
    priors.beta.push_back(BetaPrior::isotropic(1, 1.0));
    gp.push_back(GammaProcessPrior::from_cumulative(0.1, rs.grid(), [](double t) { return 0.5 * t; }));
  }
  const std::size_t draws = 100000;
  ChainConfig cfg;
  cfg.iterations = 1;
  cfg.burn_in = 0;
  cfg.thin = 1;
  cfg.updates.nu = cfg.updates.beta = cfg.updates.frailty = false;

  std::vector<std::vector<double>> inc(3);
  const std::size_t js[3] = {0, 3, 7};
  for (std::size_t r = 0; r < draws; ++r) {
    cfg.seed = r + 1;
    const auto st = run_chain(rs, priors, gp, cfg, 0).final_state;
    for (int a = 0; a < 3; ++a) inc[a].push_back(st.increments[1][js[a]]);
  }
  const auto post = lambda_posterior_all(rs, std::vector<double>(rs.subjects(), 1.0), Eigen::VectorXd::Zero(1), gp[1], 1);
  double worst_z = 0.0;
  auto check = [&](const std::vector<double>& x, const GammaParams& g) {
    const double n = static_cast<double>(x.size());
    const double zm = std::abs(oracle::mean(x) - g.mean()) / std::sqrt(g.variance() / n);
    const double v = g.variance();
    const double var_of_var = v * v * (2.0 / (n - 1.0) + 6.0 / g.shape / n);
    const double zv = std::abs(oracle::variance(x) - v) / std::sqrt(var_of_var);
    worst_z = std::max({worst_z, zm, zv});
  };
  for (int a = 0; a < 3; ++a) check(inc[a], post[js[a]]);

  cfg.updates.increments = false;
  cfg.updates.frailty = true;
  cfg.init.nu = 1.7;
  std::vector<std::vector<double>> w(2);
  for (std::size_t r = 0; r < draws; ++r) {
    cfg.seed = r + 1;
    const auto st = run_chain(rs, priors, gp, cfg, 0).final_state;
    w[0].push_back(st.w[0]);
    w[1].push_back(st.w[1]);
  }
  ModelState st;
  for (const auto& g : gp) st.increments.push_back(g.reference_increments);
  st.nu = 1.7;
  st.beta.assign(rs.process_count(), Eigen::VectorXd::Zero(1));
  st.w.assign(rs.subjects(), 1.0);
  check(w[0], frailty_posterior(rs, st, 0));
  check(w[1], frailty_posterior(rs, st, 1));
  return {worst_z < 3.0, "largest |z| of sampled mean/variance " + fmt(worst_z, 3) + " (10^5 draws)"};
}

Outcome c3_gradient() {
  std::mt19937_64 rng(303);
  std::normal_distribution<double> z(0.0, 0.7);
  std::uniform_real_distribution<double> u(0.3, 2.0);
  double worst = 0.0;
  int points = 0;
  Cohort c = oracle::random_cohort(rng, 15, 2, 2, 4);
  while (c.q_count < 2) c = oracle::random_cohort(rng, 15, 2, 2, 4);
  const auto rs = summarize(c, build_grid(DataGrid{}, &c));
  const BetaPrior prior = BetaPrior::isotropic(2, 1.5);
  for (int k = 0; k <= rs.q_count(); ++k) {
    for (int pt = 0; pt < 20; ++pt) {
      std::vector<double> w(rs.subjects());
      for (auto& v : w) v = u(rng);
      std::vector<double> incs(rs.intervals());
      for (auto& v : incs) v = 0.2 * u(rng);
      const auto base = baseline_exposure(rs, k, incs);
      Eigen::VectorXd beta(2), grad;
      beta << z(rng), z(rng);
      beta_log_posterior(rs, k, beta, w, base, prior, &grad);
      for (Eigen::Index d = 0; d < 2; ++d) {
        auto f = [&](double v) {
          Eigen::VectorXd b = beta;
          b[d] = v;
          return beta_log_posterior(rs, k, b, w, base, prior);
        };
        const double fd = oracle::central_difference(f, beta[d], 1e-5);
        worst = std::max(worst, std::abs(fd - grad[d]) / std::max(1.0, std::abs(grad[d])));
      }
      ++points;
    }
  }
  return {worst < 1e-6, std::to_string(points) + " points over " + std::to_string(rs.process_count()) + " blocks, max rel err " + sci(worst)};
}

Outcome c4_riskset_oracle() {
  std::mt19937_64 rng(404);
  std::uniform_int_distribution<std::size_t> m_dist(1, 6);
  std::size_t cohorts = 0, mismatches = 0;
  for (int trial = 0; trial < 5000; ++trial) {
    const Cohort c = oracle::random_cohort(rng, 5, 3, 1, 3);
    auto cuts = oracle::random_cuts(rng, m_dist(rng));
    if (cuts.back() < 3.0) cuts.back() = 3.0;
    if (cuts.size() > 2 && cuts[cuts.size() - 2] >= cuts.back()) continue;
    const auto rs = summarize(c, PartitionGrid(cuts));
    ++cohorts;
    for (std::size_t i = 0; i < c.size(); ++i) {
      const auto& s = c.subjects[i];
      for (std::size_t j = 1; j < cuts.size(); ++j) {
        for (int q = 1; q <= c.q_count; ++q) {
          mismatches += rs.n_inc(q, i, j) != oracle::bin_count(s.type(q).completed, cuts, j);
          mismatches += rs.y_at(q, i, j) != oracle::at_risk_count(oracle::exposures_of(s, q), cuts[j]);
        }
        const std::vector<double> term = s.terminal_observed ? std::vector<double>{*s.terminal_time} : std::vector<double>{};
        mismatches += rs.n_inc(0, i, j) != oracle::bin_count(term, cuts, j);
        mismatches += rs.y_at(0, i, j) != oracle::at_risk_count({s.window()}, cuts[j]);
      }
    }
  }
  return {mismatches == 0, std::to_string(cohorts) + " cohorts, " + std::to_string(mismatches) + " mismatches"};
}

Outcome c5_frailty_identities() {
  Cohort c;
  c.q_count = 1;
  c.subjects.push_back(subject_from_gaps("a", {}, 3.0, std::nullopt, {{0.5, 0.5, 0.5}}));
  c.subjects.push_back(subject_from_gaps("b", {}, 3.0, std::nullopt, {{}}));
  const auto rs = summarize(c, build_grid(DataGrid{}, &c));
  const auto m = frailty_posterior_means(rs, {1.5, 0.0}, 2.0);
  const auto big = frailty_posterior_means(rs, {1.5, 0.0}, 1e12);
  const auto e = e_step({0.0, 3.0}, {0.0, 1.5}, 2.0);
  const bool ok = m[1] == 1.0 && m[0] == 10.0 / 7.0 && std::abs(big[0] - 1.0) < 1e-10 && e.w_hat[0] == 1.0 && e.w_hat[1] == 10.0 / 7.0;
  return {ok, "zero-data mean " + fmt(m[1], 12) + ", (N=3, r=1.5, nu=2) mean " + fmt(m[0], 12) + ", nu=1e12 mean " + fmt(big[0], 12)};
}

Outcome c6_survival_identities() {
  const double v = survival_estimate(1.0, 2.0);
  double worst_limit = 0.0;
  for (double lam : {0.05, 0.5, 1.0, 2.0, 4.0}) worst_limit = std::max(worst_limit, std::abs(survival_estimate(lam, 1e6) - std::exp(-lam)));
  bool shape_ok = true;
  for (double nu : {0.3, 1.0, 2.0, 10.0}) {
    double prev = 1.0;
    for (int a = 0; a <= 200; ++a) {
      const double s = survival_estimate(0.05 * a, nu);
      shape_ok = shape_ok && s > 0.0 && s <= 1.0 && s <= prev;
      prev = s;
    }
  }
  const bool ok = std::abs(v - 4.0 / 9.0) < 1e-15 && worst_limit < 1e-4 && shape_ok && survival_estimate(0.0, 2.0) == 1.0;
  return {ok, "S(nu=2, L=1) = " + fmt(v, 15) + ", max |S - exp(-L)| at nu=1e6 " + sci(worst_limit)};
}

Outcome c7_correlation() {
  const double nu = 4.0;
  std::vector<double> a, b;
  for (std::size_t i = 0; i < 100000; ++i) {
    auto rng = keyed_stream({707, i});
    const double w = gamma_draw(rng, nu, nu);
    a.push_back(candidate_gap(1.0, 1.0, w, uniform_open(rng)));
    b.push_back(candidate_gap(1.0, 1.0, w, uniform_open(rng)));
  }
  const double ma = oracle::mean(a), mb = oracle::mean(b);
  double sab = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sab += (a[i] - ma) * (b[i] - mb);
  const double corr = sab / static_cast<double>(a.size() - 1) / std::sqrt(oracle::variance(a) * oracle::variance(b));
  return {std::abs(corr - 0.25) <= 0.02, "sample correlation " + fmt(corr) + " (10^5 subjects)"};
}

Outcome c8_diagnostics() {
  const double fixture = split_rhat({{0.0, 2.0}, {1.0, 1.0}});
  std::mt19937_64 rng(808);
  std::normal_distribution<double> z(0.0, 1.0);
  ChainSet iid(4, std::vector<double>(2500));
  for (auto& c : iid)
    for (auto& v : c) v = z(rng);
  const double frac = ess(iid) / 10000.0;
  ChainSet stuck{std::vector<double>(500, 0.0), std::vector<double>(500, 10.0)};
  for (auto& c : stuck)
    for (auto& v : c) v += 0.01 * z(rng);
  const double stuck_rhat = split_rhat(stuck);
  const bool ok = fixture == std::sqrt(0.5) && frac >= 0.8 && frac <= 1.2 && stuck_rhat > 1.2;
  return {ok, "fixture R-hat " + fmt(fixture, 10) + ", iid ESS fraction " + fmt(frac, 3) + ", stuck R-hat " + fmt(stuck_rhat, 1)};
}

// ---------------------------------------------------------------------------
// Desk-scale reproduction

ScenarioConfig desk(std::size_t n, double nu, double gamma, std::size_t reps) {
  auto cfg = paper_scenario(n, nu, gamma);
  cfg.n_replications = reps;
  cfg.chain.iterations = 3000;
  cfg.chain.burn_in = 1500;
  cfg.chain.thin = 5;
  return cfg;
}

bool within(double v, double centre, double half) { return std::abs(v - centre) <= half; }

std::string failures(const ScenarioResult& r) {
  return " [failed fits: bayes " + std::to_string(r.bayes_failures) + ", em " + std::to_string(r.em_failures) + "]";
}

struct Shared {
  std::optional<ScenarioResult> base;  // n=100, gamma=1.1, nu=2, both methods
};

const ScenarioResult& base_run(Shared& sh) {
  if (!sh.base) sh.base = run_scenario(desk(100, 2.0, 1.1, 100));
  return *sh.base;
}

Outcome c9(Shared& sh) {
  const auto& r = base_run(sh);
  const auto& nu = r.metric("bayes", "nu");
  const auto& b11 = r.metric("bayes", "beta1_1");
  const auto& b01 = r.metric("bayes", "beta0_1");
  const bool ok = within(nu.bias, -0.223, 0.15) && within(nu.rmse, 0.423, 0.15) && within(b11.rmse, 0.168, 0.05) && b01.cp >= 0.88 &&
                  b01.cp <= 1.0;
  return {ok, "nu bias " + fmt(nu.bias) + " rmse " + fmt(nu.rmse) + "; beta1_1 rmse " + fmt(b11.rmse) + "; beta0_1 cp " + fmt(b01.cp, 2) +
                  failures(r)};
}

Outcome c10(Shared& sh) {
  const auto& r = base_run(sh);
  const auto& nu = r.metric("em", "nu");
  const auto& b11 = r.metric("em", "beta1_1");
  const bool ok = within(nu.bias, 1.614, 0.25) && nu.cp <= 0.40 && within(b11.rmse, 0.253, 0.08);
  return {ok, "EM nu bias " + fmt(nu.bias) + " cp " + fmt(nu.cp, 2) + "; beta1_1 rmse " + fmt(b11.rmse) + failures(r)};
}

Outcome c11() {
  const auto r = run_scenario(desk(100, 4.0, 0.9, 100));
  const double bayes = r.metric("bayes", "nu").rmse, em = r.metric("em", "nu").rmse;
  return {bayes <= 0.549 + 0.20 && em >= 3.0, "Bayes nu rmse " + fmt(bayes) + " (bias " + fmt(r.metric("bayes", "nu").bias) + "), EM nu rmse " +
                                                  fmt(em) + failures(r)};
}

Outcome c12() {
  const auto r = run_scenario(desk(300, 2.0, 1.1, 100));
  const auto b = r.rmse_curve("bayes", 1), e = r.rmse_curve("em", 1);
  std::size_t wins = 0;
  for (std::size_t a = 0; a < b.size(); ++a) wins += b[a] < e[a];
  const double share = static_cast<double>(wins) / static_cast<double>(b.size());
  return {share >= 0.80, "Bayes below EM at " + std::to_string(wins) + "/" + std::to_string(b.size()) + " evaluation times" + failures(r)};
}

Outcome c13(Shared& sh) {
  const auto& ref = base_run(sh);
  auto cfg = desk(100, 2.0, 1.1, 100);
  cfg.run_em = false;
  apply_misspecified_baseline(cfg);
  const auto mis = run_scenario(cfg);
  double worst = 0.0;
  std::string per;
  for (int k : {1, 2, 0}) {
    const double ch = sup_relative_change(ref.rmse_curve("bayes", k), mis.rmse_curve("bayes", k));
    worst = std::max(worst, ch);
    per += " type" + std::to_string(k) + "=" + fmt(ch, 3);
  }
  return {worst < 0.25, "sup-norm relative change" + per};
}

Outcome c14(Shared& sh) {
  const auto& ref = base_run(sh);
  auto cfg = desk(100, 2.0, 1.1, 100);
  cfg.run_em = false;
  cfg.priors.nu = moment_matched_lognormal(std::get<GammaNuPrior>(cfg.priors.nu));
  const auto ln = run_scenario(cfg);
  double worst = 0.0;
  std::string which;
  for (const auto& name : ref.names) {
    const double d = std::abs(ref.metric("bayes", name).bias - ln.metric("bayes", name).bias);
    if (d > worst) {
      worst = d;
      which = name;
    }
  }
  return {worst <= 0.05, "max |bias difference| " + fmt(worst) + " (" + which + ")"};
}

Outcome c15() {
  const auto rob = robustness_suite(desk(100, 2.0, 1.1, 100), RobustnessVariant::init_sensitivity);
  double bayes_max = 0.0, em_beta_max = 0.0;
  std::string bayes_which, em_which;
  for (const auto& row : rob.rk) {
    if (row.method == "bayes" && row.rk > bayes_max) {
      bayes_max = row.rk;
      bayes_which = row.param;
    }
    if (row.method == "em" && row.param != "nu" && row.rk > em_beta_max) {
      em_beta_max = row.rk;
      em_which = row.param;
    }
  }
  return {bayes_max <= 0.01 && em_beta_max > 0.4,
          "Bayes max R_k " + fmt(bayes_max) + " (" + bayes_which + "); EM max beta R_k " + fmt(em_beta_max) + " (" + em_which + ")"};
}

Outcome c16() {
  auto cfg = paper_scenario(100, 2.0, 1.1);
  const Cohort cohort = simulate_cohort(cfg, 0);
  const auto grid = build_grid(cfg.grid);
  const auto rs = summarize(cohort, grid);
  ChainConfig cc = cfg.chain;
  cc.iterations = 10000;
  cc.burn_in = 5000;
  cc.thin = 5;
  cc.n_chains = 4;
  cc.seed = 1616;
  const auto draws = run_chains(rs, build_param_priors(cfg.priors, rs.process_count(), rs.covariates()),
                                build_process_priors(cfg.priors, cfg.truth.gamma, grid), cc);
  const auto rep = diagnose(draws);
  double rmax = 0.0, emin = 1.0;
  for (const auto& row : rep.rows) {
    rmax = std::max(rmax, row.rhat);
    emin = std::min(emin, row.ess_fraction);
  }
  return {rep.all_ok(), "max R-hat " + fmt(rmax) + ", min ESS " + fmt(100.0 * emin, 1) + "% of 4000 draws"};
}

Outcome c17() {
  auto time_for = [](std::size_t n) {
    auto cfg = desk(n, 2.0, 1.1, 5);
    double total = 0.0;
    for (std::size_t r = 0; r < cfg.n_replications; ++r) total += fit_bayes(cfg, simulate_cohort(cfg, r), r).seconds;
    return total / static_cast<double>(cfg.n_replications);
  };
  const double t100 = time_for(100), t300 = time_for(300);
  const double ratio = t300 / t100;
  return {ratio <= 4.0, "mean fit time n=100 " + fmt(t100, 3) + " s, n=300 " + fmt(t300, 3) + " s, ratio " + fmt(ratio, 2)};
}

Outcome smoke_large() {
  auto cfg = paper_scenario(30000, 2.0, 1.1);
  cfg.chain.iterations = 300;
  cfg.chain.burn_in = 150;
  cfg.chain.thin = 5;
  cfg.em.compute_se = false;
  const auto t0 = std::chrono::steady_clock::now();
  const Cohort cohort = simulate_cohort(cfg, 0);
  const auto bayes = fit_bayes(cfg, cohort, 0);
  const auto em = fit_em_cohort(cfg, cohort);
  const bool ok = bayes.ok && em.ok && std::isfinite(bayes.estimate.front()) && std::isfinite(em.estimate.front());
  return {ok, "n=30000, 2 recurrent types: Bayes " + fmt(bayes.seconds, 1) + " s (nu " + fmt(bayes.estimate.empty() ? NAN : bayes.estimate[0], 3) +
                  "), EM " + fmt(em.seconds, 1) + " s (nu " + fmt(em.estimate.empty() ? NAN : em.estimate[0], 3) + ")" +
                  (ok ? "" : " error: " + bayes.error + em.error) + ", total " + fmt(seconds_since(t0), 1) + " s"};
}

std::set<int> parse_list(const std::string& s) {
  std::set<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.insert(std::stoi(tok));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string only, expected;
  app.add_option("--only", only, "comma-separated criteria to run (18 = large-cohort smoke fit)");
  app.add_option("--expected-fail", expected, "comma-separated criteria whose failure is documented");
  CLI11_PARSE(app, argc, argv);
  const auto selected = parse_list(only);
  const auto allowed = parse_list(expected);

  Shared sh;
  struct Item {
    int id;
    const char* title;
    std::function<Outcome()> fn;
  };
  const std::vector<Item> items = {
      {1, "Breslow recovery at vanishing prior precision", c1_breslow_recovery},
      {2, "conjugate draw moments", c2_conjugacy},
      {3, "beta score vs central differences", c3_gradient},
      {4, "risk-set brute-force oracle", c4_riskset_oracle},
      {5, "frailty identities", c5_frailty_identities},
      {6, "survival identities", c6_survival_identities},
      {7, "gap correlation at nu = 4", c7_correlation},
      {8, "diagnostics fixtures", c8_diagnostics},
      {9, "Bayes accuracy, n=100 gamma=1.1 nu=2", [&] { return c9(sh); }},
      {10, "EM accuracy, n=100 gamma=1.1 nu=2", [&] { return c10(sh); }},
      {11, "nu RMSE, n=100 gamma=0.9 nu=4", c11},
      {12, "type-1 survival RMSE dominance, n=300", c12},
      {13, "misspecified baseline prior robustness", [&] { return c13(sh); }},
      {14, "log-normal nu prior robustness", [&] { return c14(sh); }},
      {15, "initialization sensitivity", c15},
      {16, "4-chain convergence thresholds", c16},
      {17, "runtime scaling n=300 vs n=100", c17},
      {18, "smoke fit n=30000", smoke_large},
  };

  int unexpected = 0;
  for (const auto& it : items) {
    if (!selected.empty() && !selected.count(it.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = it.fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const char* label = it.id == 18 ? "smoke" : "criterion";
    std::string id = it.id == 18 ? "" : " " + std::to_string(it.id);
    std::cout << (o.pass ? "PASS" : "FAIL") << ' ' << label << id << ": " << it.title << " -- " << o.detail << " ("
              << fmt(seconds_since(t0), 1) << " s)";
    if (!o.pass && allowed.count(it.id)) std::cout << " [documented failure]";
    if (o.pass && allowed.count(it.id)) std::cout << " [listed as expected failure but passed]";
    std::cout << std::endl;
    if (!o.pass && !allowed.count(it.id)) ++unexpected;
  }
  return unexpected == 0 ? 0 : 1;
}
