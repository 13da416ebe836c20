#pragma once

// Simulation laboratory: data generator, scenario runner (Bayesian and EM
// fits on identical cohorts), accuracy and prediction metrics, robustness
// studies and runtime benchmarking.

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "gaptide/diagnostics.hpp"
#include "gaptide/em.hpp"
#include "gaptide/event_data.hpp"
#include "gaptide/model_core.hpp"
#include "gaptide/random.hpp"
#include "gaptide/riskset.hpp"
#include "gaptide/sampler.hpp"

namespace gaptide {

/// Generating parameters. Per-process vectors are indexed by k (0 = terminal).
struct Truth {
  double nu = 2.0;
  double gamma = 1.1;
  std::vector<double> scales{3.2, 1.2, 1.1};
  std::vector<Eigen::VectorXd> beta{Eigen::Vector2d(-0.1, 0.1), Eigen::Vector2d(-0.4, 0.35), Eigen::Vector2d(-0.3, 0.25)};

  int q_count() const { return static_cast<int>(scales.size()) - 1; }
  std::size_t p() const { return beta.empty() ? 0 : static_cast<std::size_t>(beta.front().size()); }
  double cumhaz(std::size_t k, double t) const { return t <= 0.0 ? 0.0 : std::pow(t / scales.at(k), gamma); }
  /// Marginal survival of process k, frailty integrated out.
  double marginal_survival(std::size_t k, double t) const { return survival_estimate(cumhaz(k, t), nu); }
  std::vector<double> parameters() const { return flatten_parameters(nu, beta); }

  void validate() const {
    if (!(nu > 0.0) || !(gamma > 0.0)) throw std::invalid_argument("truth needs nu > 0 and gamma > 0");
    if (scales.size() < 2 || beta.size() != scales.size()) throw std::invalid_argument("truth needs one scale and beta per process");
    for (double s : scales)
      if (!(s > 0.0)) throw std::invalid_argument("all scales must be positive");
    for (const auto& b : beta)
      if (b.size() != 2) throw std::invalid_argument("the generator draws two covariates; beta vectors need length 2");
  }
};

/// Weibull candidate gap lambda * (-log u / M)^(1/gamma).
inline double candidate_gap(double scale, double gamma, double multiplier, double u) {
  return scale * std::pow(-std::log(u) / multiplier, 1.0 / gamma);
}

enum class ReferenceKind { weibull, exponential };

struct PriorSpec {
  double c = 0.1;
  ReferenceKind reference = ReferenceKind::weibull;  // Weibull references use the truth's shape
  std::vector<double> reference_scales{3.1, 1.1, 1.0};
  NuPrior nu = GammaNuPrior{2.0, 2.0};
  double beta_var = 1.0;
};

struct ScenarioConfig {
  std::string label = "scenario";
  std::size_t n = 100;
  Truth truth;
  double censor_lower = 1.0;
  double censor_upper = 3.0;
  double admin_end = 3.0;
  StepGrid grid;
  PriorSpec priors;
  ChainConfig chain;
  EmConfig em;
  std::size_t n_replications = 500;
  std::uint64_t master_seed = 20240601;
  std::size_t eval_points = 60;
  double eval_horizon = 3.0;
  unsigned threads = 1;
  bool run_bayes = true;
  bool run_em = true;

  void validate() const {
    if (n < 1) throw std::invalid_argument("scenario needs n >= 1");
    truth.validate();
    if (!(censor_lower > 0.0) || !(censor_upper >= censor_lower) || !(censor_upper <= admin_end))
      throw std::invalid_argument("censoring window must lie within (0, admin_end]");
    if (priors.reference_scales.size() != truth.scales.size()) throw std::invalid_argument("one reference scale per process is required");
    chain.validate();
    em.validate();
    if (eval_points < 1 || !(eval_horizon > 0.0)) throw std::invalid_argument("evaluation grid must be nonempty");
  }

  std::vector<double> eval_times() const {
    std::vector<double> t(eval_points);
    for (std::size_t a = 0; a < eval_points; ++a) t[a] = eval_horizon * static_cast<double>(a + 1) / static_cast<double>(eval_points);
    return t;
  }
};

namespace detail {

inline std::vector<Eigen::VectorXd> constant_beta(std::size_t K, double v1, double v2) {
  return std::vector<Eigen::VectorXd>(K, Eigen::Vector2d(v1, v2));
}

}  // namespace detail

/// Initial values used in the simulation study: beta_q = (-1.5, 1.5),
/// beta_0 = (-1.8, 1.9), nu = 3.
inline void set_default_inits(ScenarioConfig& cfg) {
  const std::size_t K = cfg.truth.scales.size();
  auto beta = detail::constant_beta(K, -1.5, 1.5);
  beta[0] = Eigen::Vector2d(-1.8, 1.9);
  cfg.chain.init.beta = beta;
  cfg.chain.init.nu = 3.0;
  cfg.em.beta_init = beta;
  cfg.em.nu_init = 3.0;
}

/// Simulation-study scenario with the generator, priors and initial values of the reference design.
inline ScenarioConfig paper_scenario(std::size_t n, double nu, double gamma) {
  ScenarioConfig cfg;
  cfg.n = n;
  cfg.truth.nu = nu;
  cfg.truth.gamma = gamma;
  cfg.chain.iterations = 5000;
  cfg.chain.burn_in = 2000;
  cfg.chain.thin = 5;
  set_default_inits(cfg);
  cfg.label = "n" + std::to_string(n) + "_nu" + std::to_string(static_cast<int>(nu)) + (gamma > 1.0 ? "_ifr" : "_dfr");
  return cfg;
}

// ---------------------------------------------------------------------------
// Config file (JSON, "schema": 1)

namespace detail {

using nlohmann::json;

inline std::vector<double> per_process_scalars(const json& j, std::size_t q_hint = 0) {
  const auto rec = j.at("recurrent").get<std::vector<double>>();
  if (q_hint && rec.size() != q_hint) throw std::invalid_argument("recurrent entries do not match the number of types");
  std::vector<double> out{j.at("terminal").get<double>()};
  out.insert(out.end(), rec.begin(), rec.end());
  return out;
}

inline std::vector<Eigen::VectorXd> per_process_vectors(const json& j) {
  auto vec = [](const json& a) {
    const auto v = a.get<std::vector<double>>();
    return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  std::vector<Eigen::VectorXd> out{vec(j.at("terminal"))};
  for (const auto& r : j.at("recurrent")) out.push_back(vec(r));
  return out;
}

inline json per_process_json(const std::vector<double>& v) {
  return json{{"recurrent", std::vector<double>(v.begin() + 1, v.end())}, {"terminal", v.front()}};
}

inline json per_process_json(const std::vector<Eigen::VectorXd>& v) {
  auto arr = [](const Eigen::VectorXd& b) { return std::vector<double>(b.data(), b.data() + b.size()); };
  json rec = json::array();
  for (std::size_t k = 1; k < v.size(); ++k) rec.push_back(arr(v[k]));
  return json{{"recurrent", rec}, {"terminal", arr(v.front())}};
}

inline NuPrior nu_prior_from_json(const json& j) {
  const auto family = j.value("family", std::string("gamma"));
  if (family == "gamma") return GammaNuPrior{j.value("shape", 2.0), j.value("rate", 2.0)};
  if (family == "lognormal") return LogNormalNuPrior{j.value("meanlog", 0.0), j.value("varlog", 1.0)};
  throw std::invalid_argument("unknown nu prior family: " + family);
}

inline json nu_prior_json(const NuPrior& p) {
  if (const auto* g = std::get_if<GammaNuPrior>(&p)) return json{{"family", "gamma"}, {"shape", g->shape}, {"rate", g->rate}};
  const auto& l = std::get<LogNormalNuPrior>(p);
  return json{{"family", "lognormal"}, {"meanlog", l.meanlog}, {"varlog", l.varlog}};
}

}  // namespace detail

/// Reads a scenario from JSON. Missing fields keep the reference-design defaults.
inline ScenarioConfig scenario_from_json(const nlohmann::json& j) {
  using detail::json;
  if (j.value("schema", 0) != 1) throw std::invalid_argument("scenario config must declare \"schema\": 1");
  const double nu = j.contains("truth") ? j["truth"].value("nu", 2.0) : 2.0;
  const double gamma = j.contains("truth") ? j["truth"].value("gamma", 1.1) : 1.1;
  ScenarioConfig cfg = paper_scenario(j.value("n", std::size_t{100}), nu, gamma);
  cfg.label = j.value("label", cfg.label);
  if (j.contains("truth")) {
    const auto& t = j["truth"];
    if (t.contains("scales")) cfg.truth.scales = detail::per_process_scalars(t["scales"]);
    if (t.contains("beta")) cfg.truth.beta = detail::per_process_vectors(t["beta"]);
  }
  if (j.contains("censoring")) {
    const auto& c = j["censoring"];
    if (c.contains("window")) {
      const auto w = c["window"].get<std::vector<double>>();
      if (w.size() != 2) throw std::invalid_argument("censoring window needs two values");
      cfg.censor_lower = w[0];
      cfg.censor_upper = w[1];
    }
    cfg.admin_end = c.value("admin_end", cfg.admin_end);
  }
  if (j.contains("grid")) {
    cfg.grid.step = j["grid"].value("step", cfg.grid.step);
    cfg.grid.horizon = j["grid"].value("horizon", cfg.grid.horizon);
  }
  if (cfg.truth.scales.size() != cfg.priors.reference_scales.size()) {
    cfg.priors.reference_scales = cfg.truth.scales;
    set_default_inits(cfg);
  }
  if (j.contains("priors")) {
    const auto& p = j["priors"];
    cfg.priors.c = p.value("c", cfg.priors.c);
    const auto ref = p.value("reference", std::string("weibull"));
    if (ref == "weibull") cfg.priors.reference = ReferenceKind::weibull;
    else if (ref == "exponential") cfg.priors.reference = ReferenceKind::exponential;
    else throw std::invalid_argument("unknown reference family: " + ref);
    if (p.contains("reference_scales")) cfg.priors.reference_scales = detail::per_process_scalars(p["reference_scales"]);
    if (p.contains("nu")) cfg.priors.nu = detail::nu_prior_from_json(p["nu"]);
    cfg.priors.beta_var = p.value("beta_var", cfg.priors.beta_var);
  }
  if (j.contains("chain")) {
    const auto& c = j["chain"];
    cfg.chain.iterations = c.value("iterations", cfg.chain.iterations);
    cfg.chain.burn_in = c.value("burn_in", cfg.chain.burn_in);
    cfg.chain.thin = c.value("thin", cfg.chain.thin);
    cfg.chain.n_chains = c.value("chains", cfg.chain.n_chains);
    if (c.contains("init")) {
      cfg.chain.init.nu = c["init"].value("nu", cfg.chain.init.nu);
      if (c["init"].contains("beta")) cfg.chain.init.beta = detail::per_process_vectors(c["init"]["beta"]);
    }
    if (c.contains("update")) {
      cfg.chain.updates.increment_mode =
          c["update"].value("increments", std::string("draw")) == "posterior_mean" ? IncrementUpdate::posterior_mean : IncrementUpdate::draw;
      cfg.chain.updates.frailty_mode =
          c["update"].value("frailty", std::string("draw")) == "posterior_mean" ? FrailtyUpdate::posterior_mean : FrailtyUpdate::draw;
    }
  }
  if (j.contains("em")) {
    const auto& e = j["em"];
    cfg.em.max_iter = e.value("max_iter", cfg.em.max_iter);
    cfg.em.tol = e.value("tol", cfg.em.tol);
    if (e.contains("nu_bounds")) {
      const auto b = e["nu_bounds"].get<std::vector<double>>();
      if (b.size() != 2) throw std::invalid_argument("nu_bounds needs two values");
      cfg.em.nu_min = b[0];
      cfg.em.nu_max = b[1];
    }
    if (e.contains("init")) {
      cfg.em.nu_init = e["init"].value("nu", cfg.em.nu_init);
      if (e["init"].contains("beta")) cfg.em.beta_init = detail::per_process_vectors(e["init"]["beta"]);
    }
  }
  cfg.n_replications = j.value("n_replications", cfg.n_replications);
  cfg.master_seed = j.value("master_seed", cfg.master_seed);
  cfg.eval_points = j.value("eval_points", cfg.eval_points);
  cfg.eval_horizon = j.value("eval_horizon", cfg.eval_horizon);
  cfg.validate();
  return cfg;
}

inline nlohmann::json scenario_to_json(const ScenarioConfig& cfg) {
  using detail::json;
  json j;
  j["schema"] = 1;
  j["label"] = cfg.label;
  j["n"] = cfg.n;
  j["truth"] = {{"nu", cfg.truth.nu},
                {"gamma", cfg.truth.gamma},
                {"scales", detail::per_process_json(cfg.truth.scales)},
                {"beta", detail::per_process_json(cfg.truth.beta)}};
  j["censoring"] = {{"window", {cfg.censor_lower, cfg.censor_upper}}, {"admin_end", cfg.admin_end}};
  j["grid"] = {{"step", cfg.grid.step}, {"horizon", cfg.grid.horizon}};
  j["priors"] = {{"c", cfg.priors.c},
                 {"reference", cfg.priors.reference == ReferenceKind::weibull ? "weibull" : "exponential"},
                 {"reference_scales", detail::per_process_json(cfg.priors.reference_scales)},
                 {"nu", detail::nu_prior_json(cfg.priors.nu)},
                 {"beta_var", cfg.priors.beta_var}};
  json chain_init{{"nu", cfg.chain.init.nu}};
  if (!cfg.chain.init.beta.empty()) chain_init["beta"] = detail::per_process_json(cfg.chain.init.beta);
  j["chain"] = {{"iterations", cfg.chain.iterations},
                {"burn_in", cfg.chain.burn_in},
                {"thin", cfg.chain.thin},
                {"chains", cfg.chain.n_chains},
                {"init", chain_init},
                {"update",
                 {{"increments", cfg.chain.updates.increment_mode == IncrementUpdate::draw ? "draw" : "posterior_mean"},
                  {"frailty", cfg.chain.updates.frailty_mode == FrailtyUpdate::draw ? "draw" : "posterior_mean"}}}};
  json em_init{{"nu", cfg.em.nu_init}};
  if (!cfg.em.beta_init.empty()) em_init["beta"] = detail::per_process_json(cfg.em.beta_init);
  j["em"] = {{"max_iter", cfg.em.max_iter}, {"tol", cfg.em.tol}, {"nu_bounds", {cfg.em.nu_min, cfg.em.nu_max}}, {"init", em_init}};
  j["n_replications"] = cfg.n_replications;
  j["master_seed"] = cfg.master_seed;
  j["eval_points"] = cfg.eval_points;
  j["eval_horizon"] = cfg.eval_horizon;
  return j;
}

inline ScenarioConfig load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  return scenario_from_json(nlohmann::json::parse(in));
}

// ---------------------------------------------------------------------------
// Generator

/// One subject: frailty, covariates, censoring time, then competing Weibull
/// candidate gaps with every clock reset at each realized event. Recurrent
/// gaps are recorded per type from the realized calendar times.
template <class Rng>
SubjectHistory simulate_subject(const Truth& truth, double censor_lower, double censor_upper, double admin_end, std::string id, Rng& rng) {
  const std::size_t K = truth.scales.size();
  const double w = gamma_draw(rng, truth.nu, truth.nu);
  const double x1 = uniform_open(rng) < 0.5 ? 1.0 : 0.0;
  const double x2 = standard_normal(rng);
  const double tau = std::min(censor_lower + (censor_upper - censor_lower) * uniform_open(rng), admin_end);
  const Eigen::Vector2d x(x1, x2);
  std::vector<double> mult(K);
  for (std::size_t k = 0; k < K; ++k) mult[k] = w * std::exp(truth.beta[k].dot(x));

  std::vector<std::vector<double>> calendar(K - 1);
  std::optional<double> terminal;
  double clock = 0.0;
  while (true) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t which = 0;
    for (std::size_t step = 0; step < K; ++step) {
      const std::size_t k = step + 1 < K ? step + 1 : 0;  // recurrent types first, terminal last
      const double gap = candidate_gap(truth.scales[k], truth.gamma, mult[k], uniform_open(rng));
      if (gap < best) {
        best = gap;
        which = k;
      }
    }
    const double next = clock + best;
    if (next > tau) break;
    if (which == kTerminal) {
      terminal = next;
      break;
    }
    calendar[which - 1].push_back(next);
    clock = next;
  }
  return subject_from_calendar(std::move(id), {x1, x2}, tau, terminal, std::move(calendar));
}

/// Cohort of replication `rep`; subject i uses the stream (master_seed, rep, i).
inline Cohort simulate_cohort(const ScenarioConfig& cfg, std::size_t rep) {
  Cohort c;
  c.q_count = cfg.truth.q_count();
  c.p = 2;
  c.subjects.reserve(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    auto rng = keyed_stream({cfg.master_seed, rep, i});
    c.subjects.push_back(simulate_subject(cfg.truth, cfg.censor_lower, cfg.censor_upper, cfg.admin_end, "s" + std::to_string(i + 1), rng));
  }
  return c;
}

/// FNV-1a hash over every number of a cohort.
inline std::uint64_t cohort_hash(const Cohort& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& s : c.subjects) {
    for (double v : s.x) mix(v);
    mix(s.tau);
    mix(s.terminal_observed ? *s.terminal_time : -1.0);
    for (const auto& g : s.gaps) {
      for (double v : g.completed) mix(v);
      mix(g.residual);
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Fits

inline std::vector<GammaProcessPrior> build_process_priors(const PriorSpec& spec, double gamma, const PartitionGrid& grid) {
  std::vector<GammaProcessPrior> out;
  for (double scale : spec.reference_scales) {
    const double shape = spec.reference == ReferenceKind::weibull ? gamma : 1.0;
    out.push_back(GammaProcessPrior::from_cumulative(spec.c, grid, [=](double t) { return t <= 0.0 ? 0.0 : std::pow(t / scale, shape); }));
  }
  return out;
}

inline ParamPriors build_param_priors(const PriorSpec& spec, std::size_t K, std::size_t p) {
  ParamPriors pp;
  pp.nu = spec.nu;
  pp.beta.assign(K, BetaPrior::isotropic(p, spec.beta_var));
  return pp;
}

/// Log-normal prior with the mean and variance of Gamma(shape, rate).
inline LogNormalNuPrior moment_matched_lognormal(const GammaNuPrior& g) {
  const double mu = g.shape / g.rate;
  const double var = g.shape / (g.rate * g.rate);
  const double s2 = std::log1p(var / (mu * mu));
  return {std::log(mu) - s2 / 2.0, s2};
}

struct MethodResult {
  bool ok = false;
  std::string error;
  std::vector<double> estimate;
  std::vector<double> lower;
  std::vector<double> upper;
  std::vector<std::vector<double>> survival;           // [k][eval point]: marginal survival
  std::vector<std::vector<double>> baseline_survival;  // [k][eval point]: exp(-Lambda_hat)
  double seconds = 0.0;
  bool converged = true;
};

struct ReplicationResult {
  std::size_t index = 0;
  std::uint64_t bayes_cohort_hash = 0;
  std::uint64_t em_cohort_hash = 0;
  MethodResult bayes;
  MethodResult em;
  std::vector<ParameterDiagnostics> diagnostics;
};

namespace detail {

inline void fill_curves(MethodResult& r, const PartitionGrid& grid, const std::vector<std::vector<double>>& cumhaz, double nu,
                        const std::vector<double>& times) {
  r.survival.assign(cumhaz.size(), {});
  r.baseline_survival.assign(cumhaz.size(), {});
  for (std::size_t k = 0; k < cumhaz.size(); ++k)
    for (double t : times) {
      const double lam = step_value(grid, cumhaz[k], t);
      r.survival[k].push_back(survival_estimate(lam, nu));
      r.baseline_survival[k].push_back(std::exp(-lam));
    }
}

inline double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace detail

/// Bayesian fit of one cohort on the scenario grid. Chain seeds derive from (master_seed, rep).
inline MethodResult fit_bayes(const ScenarioConfig& cfg, const Cohort& cohort, std::size_t rep,
                              std::vector<ParameterDiagnostics>* diagnostics = nullptr) {
  MethodResult r;
  const auto start = std::chrono::steady_clock::now();
  try {
    const auto grid = build_grid(cfg.grid);
    const auto rs = summarize(cohort, grid);
    const auto gp = build_process_priors(cfg.priors, cfg.truth.gamma, grid);
    const auto priors = build_param_priors(cfg.priors, rs.process_count(), rs.covariates());
    ChainConfig cc = cfg.chain;
    cc.seed = derive_key({cfg.master_seed, rep, 0xB4E5ULL});
    const auto draws = run_chains(rs, priors, gp, cc);
    const auto summary = summarize_draws(draws);
    for (const auto& s : summary) {
      r.estimate.push_back(s.mean);
      r.lower.push_back(s.lower);
      r.upper.push_back(s.upper);
    }
    detail::fill_curves(r, grid, draws.mean_cumhaz(), r.estimate.front(), cfg.eval_times());
    if (diagnostics) {
      diagnostics->clear();
      for (std::size_t p = 0; p < draws.names().size(); ++p)
        diagnostics->push_back(diagnose_parameter(draws.names()[p], draws.parameter(p)));
    }
    r.ok = true;
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  r.seconds = detail::seconds_since(start);
  return r;
}

/// EM fit of one cohort. Breslow sums are taken at the distinct event gap times.
inline MethodResult fit_em_cohort(const ScenarioConfig& cfg, const Cohort& cohort) {
  MethodResult r;
  const auto start = std::chrono::steady_clock::now();
  try {
    const auto grid = build_grid(DataGrid{}, &cohort);
    const auto rs = summarize(cohort, grid);
    const auto fit = fit_em(rs, cfg.em);
    r.estimate = fit.estimate;
    for (std::size_t d = 0; d < fit.estimate.size(); ++d) {
      r.lower.push_back(std::isfinite(fit.se[d]) ? fit.lower(d) : std::numeric_limits<double>::quiet_NaN());
      r.upper.push_back(std::isfinite(fit.se[d]) ? fit.upper(d) : std::numeric_limits<double>::quiet_NaN());
    }
    std::vector<std::vector<double>> cumhaz;
    for (std::size_t k = 0; k < rs.process_count(); ++k) cumhaz.push_back(fit.cumhaz(k));
    detail::fill_curves(r, grid, cumhaz, fit.nu, cfg.eval_times());
    r.converged = fit.converged;
    r.ok = true;
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  r.seconds = detail::seconds_since(start);
  return r;
}

inline ReplicationResult run_replication(const ScenarioConfig& cfg, std::size_t rep) {
  ReplicationResult out;
  out.index = rep;
  if (cfg.run_bayes) {
    const Cohort cohort = simulate_cohort(cfg, rep);
    out.bayes_cohort_hash = cohort_hash(cohort);
    out.bayes = fit_bayes(cfg, cohort, rep, &out.diagnostics);
  }
  if (cfg.run_em) {
    const Cohort cohort = simulate_cohort(cfg, rep);
    out.em_cohort_hash = cohort_hash(cohort);
    out.em = fit_em_cohort(cfg, cohort);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricRow {
  std::string method;
  std::string param;
  double truth = 0.0;
  double bias = 0.0;
  double sd = 0.0;
  double rmse = 0.0;
  double cp = 0.0;
  std::size_t used = 0;
  std::size_t failed = 0;
};

/// bias = mean(est - truth), sd = sample SD, rmse = sqrt(mean((est - truth)^2)),
/// cp = share of intervals covering the truth (NaN bounds never cover).
inline MetricRow accuracy_metrics(const std::vector<double>& est, const std::vector<double>& lower, const std::vector<double>& upper,
                                  double truth) {
  MetricRow m;
  m.truth = truth;
  m.used = est.size();
  if (est.empty()) {
    m.bias = m.sd = m.rmse = m.cp = std::numeric_limits<double>::quiet_NaN();
    return m;
  }
  const double r = static_cast<double>(est.size());
  double mean = 0.0, sq = 0.0, cover = 0.0;
  for (std::size_t a = 0; a < est.size(); ++a) {
    mean += est[a];
    sq += (est[a] - truth) * (est[a] - truth);
    cover += (lower[a] <= truth && truth <= upper[a]) ? 1.0 : 0.0;
  }
  mean /= r;
  double ss = 0.0;
  for (double e : est) ss += (e - mean) * (e - mean);
  m.bias = mean - truth;
  m.sd = est.size() > 1 ? std::sqrt(ss / (r - 1.0)) : 0.0;
  m.rmse = std::sqrt(sq / r);
  m.cp = cover / r;
  return m;
}

struct CurvePoint {
  int event_type = 0;
  double t = 0.0;
  std::string method;
  double value = 0.0;
};

struct OverlayPoint {
  int event_type = 0;
  double t = 0.0;
  double truth = 0.0;
  double estimate = 0.0;
};

struct ScenarioResult {
  ScenarioConfig config;
  std::vector<std::string> names;
  std::vector<ReplicationResult> replications;
  std::vector<MetricRow> metrics;
  std::vector<CurvePoint> rmse_curves;
  std::vector<OverlayPoint> overlay;
  std::vector<ParameterDiagnostics> diagnostics;  // averaged over replications
  std::size_t bayes_failures = 0;
  std::size_t em_failures = 0;

  const MetricRow& metric(const std::string& method, const std::string& param) const {
    for (const auto& m : metrics)
      if (m.method == method && m.param == param) return m;
    throw std::out_of_range("no metric for " + method + "/" + param);
  }
  /// Survival RMSE curve of one method and event type, in evaluation order.
  std::vector<double> rmse_curve(const std::string& method, int event_type) const {
    std::vector<double> out;
    for (const auto& c : rmse_curves)
      if (c.method == method && c.event_type == event_type) out.push_back(c.value);
    return out;
  }
};

namespace detail {

inline void aggregate_method(ScenarioResult& res, const std::string& method, MethodResult ReplicationResult::*member) {
  const auto& cfg = res.config;
  const auto truth = cfg.truth.parameters();
  const auto times = cfg.eval_times();
  const std::size_t K = cfg.truth.scales.size();
  std::vector<const MethodResult*> ok;
  std::size_t failed = 0;
  for (const auto& rep : res.replications) {
    const auto& r = rep.*member;
    if (r.ok) ok.push_back(&r);
    else ++failed;
  }
  (method == "bayes" ? res.bayes_failures : res.em_failures) = failed;
  for (std::size_t d = 0; d < truth.size(); ++d) {
    std::vector<double> est, lo, hi;
    for (const auto* r : ok) {
      est.push_back(r->estimate[d]);
      lo.push_back(r->lower[d]);
      hi.push_back(r->upper[d]);
    }
    auto m = accuracy_metrics(est, lo, hi, truth[d]);
    m.method = method;
    m.param = res.names[d];
    m.failed = failed;
    res.metrics.push_back(std::move(m));
  }
  if (ok.empty()) return;
  const double r = static_cast<double>(ok.size());
  auto event_order = [&](std::size_t pos) { return pos + 1 < K ? pos + 1 : 0; };
  for (std::size_t pos = 0; pos < K; ++pos) {
    const std::size_t k = event_order(pos);
    for (std::size_t a = 0; a < times.size(); ++a) {
      const double truth_s = cfg.truth.marginal_survival(k, times[a]);
      double sq = 0.0, base = 0.0;
      for (const auto* m : ok) {
        sq += (m->survival[k][a] - truth_s) * (m->survival[k][a] - truth_s);
        base += m->baseline_survival[k][a];
      }
      res.rmse_curves.push_back({static_cast<int>(k), times[a], method, std::sqrt(sq / r)});
      if (method == "bayes") res.overlay.push_back({static_cast<int>(k), times[a], std::exp(-cfg.truth.cumhaz(k, times[a])), base / r});
    }
  }
}

}  // namespace detail

/// Runs every replication (concurrently when cfg.threads > 1) and aggregates
/// metrics. Results do not depend on the thread count.
inline ScenarioResult run_scenario(const ScenarioConfig& cfg, const std::function<void(std::size_t)>& progress = {}) {
  cfg.validate();
  ScenarioResult res;
  res.config = cfg;
  res.names = parameter_names(cfg.truth.q_count(), cfg.truth.p());
  res.replications.resize(cfg.n_replications);
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> done{0};
  auto worker = [&] {
    for (std::size_t rep = next++; rep < cfg.n_replications; rep = next++) {
      res.replications[rep] = run_replication(cfg, rep);
      const std::size_t finished = ++done;
      if (progress) progress(finished);
    }
  };
  const unsigned n_threads = std::max(1u, std::min<unsigned>(cfg.threads, static_cast<unsigned>(std::max<std::size_t>(cfg.n_replications, 1))));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (cfg.run_bayes) detail::aggregate_method(res, "bayes", &ReplicationResult::bayes);
  if (cfg.run_em) detail::aggregate_method(res, "em", &ReplicationResult::em);

  std::size_t with_diag = 0;
  for (const auto& rep : res.replications) {
    if (rep.diagnostics.empty()) continue;
    if (res.diagnostics.empty()) {
      res.diagnostics = rep.diagnostics;
      for (auto& d : res.diagnostics) d.rhat = d.ess_bulk = d.ess_tail = d.ess_fraction = 0.0;
    }
    for (std::size_t p = 0; p < rep.diagnostics.size(); ++p) {
      res.diagnostics[p].rhat += rep.diagnostics[p].rhat;
      res.diagnostics[p].ess_bulk += rep.diagnostics[p].ess_bulk;
      res.diagnostics[p].ess_tail += rep.diagnostics[p].ess_tail;
      res.diagnostics[p].ess_fraction += rep.diagnostics[p].ess_fraction;
    }
    ++with_diag;
  }
  for (auto& d : res.diagnostics) {
    const double m = static_cast<double>(with_diag);
    d.rhat /= m;
    d.ess_bulk /= m;
    d.ess_tail /= m;
    d.ess_fraction /= m;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Robustness studies

enum class RobustnessVariant { baseline_misspec, tiers, lognormal_nu, init_sensitivity };

inline RobustnessVariant parse_variant(const std::string& name) {
  if (name == "baseline_misspec") return RobustnessVariant::baseline_misspec;
  if (name == "tiers") return RobustnessVariant::tiers;
  if (name == "lognormal_nu") return RobustnessVariant::lognormal_nu;
  if (name == "init_sensitivity") return RobustnessVariant::init_sensitivity;
  throw std::invalid_argument("unknown robustness variant: " + name);
}

struct RkRow {
  std::string method;
  std::string param;
  double estimate_a = 0.0;
  double estimate_b = 0.0;
  double rk = 0.0;
};

struct RobustnessResult {
  RobustnessVariant variant;
  std::vector<std::pair<std::string, ScenarioResult>> runs;
  std::vector<RkRow> rk;

  const ScenarioResult& run(const std::string& label) const {
    for (const auto& [l, r] : runs)
      if (l == label) return r;
    throw std::out_of_range("no robustness run " + label);
  }
};

/// Prior configuration of the misspecified-baseline study: exponential
/// references with means (6.2, 7.1, 8.2) and precision 0.01.
inline void apply_misspecified_baseline(ScenarioConfig& cfg) {
  cfg.priors.reference = ReferenceKind::exponential;
  cfg.priors.reference_scales = {8.2, 6.2, 7.1};
  cfg.priors.c = 0.01;
}

/// Informativeness tiers (beta prior variance, nu prior shape = rate).
inline std::vector<std::pair<double, double>> prior_tiers() { return {{0.5, 4.0}, {1.0, 2.0}, {2.25, 1.0}, {9.0, 0.5}}; }

/// R_k = |mean estimate under start A - mean estimate under start B| per parameter and method.
inline std::vector<RkRow> init_sensitivity_table(const ScenarioResult& a, const ScenarioResult& b) {
  std::vector<RkRow> out;
  for (const auto& ma : a.metrics) {
    const auto& mb = b.metric(ma.method, ma.param);
    RkRow r{ma.method, ma.param, ma.bias + ma.truth, mb.bias + mb.truth, 0.0};
    r.rk = std::abs(r.estimate_a - r.estimate_b);
    out.push_back(std::move(r));
  }
  return out;
}

inline RobustnessResult robustness_suite(const ScenarioConfig& base, RobustnessVariant variant) {
  RobustnessResult res{variant, {}, {}};
  switch (variant) {
    case RobustnessVariant::baseline_misspec: {
      ScenarioConfig a = base, b = base;
      a.run_em = b.run_em = false;
      apply_misspecified_baseline(b);
      res.runs.emplace_back("reference", run_scenario(a));
      res.runs.emplace_back("misspecified", run_scenario(b));
      break;
    }
    case RobustnessVariant::tiers:
      for (const auto& [var, zeta] : prior_tiers()) {
        ScenarioConfig c = base;
        c.run_em = false;
        c.priors.beta_var = var;
        c.priors.nu = GammaNuPrior{zeta, zeta};
        std::ostringstream label;
        label << "var" << var << "_zeta" << zeta;
        res.runs.emplace_back(label.str(), run_scenario(c));
      }
      break;
    case RobustnessVariant::lognormal_nu: {
      ScenarioConfig a = base, b = base;
      a.run_em = b.run_em = false;
      const auto* g = std::get_if<GammaNuPrior>(&base.priors.nu);
      if (!g) throw std::invalid_argument("log-normal sensitivity needs a gamma nu prior to match");
      b.priors.nu = moment_matched_lognormal(*g);
      res.runs.emplace_back("gamma", run_scenario(a));
      res.runs.emplace_back("lognormal", run_scenario(b));
      break;
    }
    case RobustnessVariant::init_sensitivity: {
      ScenarioConfig a = base, b = base;
      const std::size_t K = base.truth.scales.size();
      for (auto [cfg, v] : {std::pair<ScenarioConfig*, double>{&a, 1.0}, {&b, 4.0}}) {
        cfg->chain.init.beta = cfg->em.beta_init = detail::constant_beta(K, v, v);
        cfg->chain.init.nu = cfg->em.nu_init = v;
      }
      res.runs.emplace_back("all_ones", run_scenario(a));
      res.runs.emplace_back("all_fours", run_scenario(b));
      res.rk = init_sensitivity_table(res.runs[0].second, res.runs[1].second);
      break;
    }
  }
  return res;
}

/// Largest absolute change between two RMSE curves relative to the largest reference value.
inline double sup_relative_change(const std::vector<double>& reference, const std::vector<double>& other) {
  if (reference.size() != other.size() || reference.empty()) throw std::invalid_argument("curves must have equal nonzero length");
  double diff = 0.0, scale = 0.0;
  for (std::size_t a = 0; a < reference.size(); ++a) {
    diff = std::max(diff, std::abs(other[a] - reference[a]));
    scale = std::max(scale, std::abs(reference[a]));
  }
  return scale > 0.0 ? diff / scale : (diff > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
}

// ---------------------------------------------------------------------------
// Runtime

struct TimingStats {
  double mean = 0.0;
  double sd = 0.0;
  std::vector<double> samples;
};

struct RuntimeSummary {
  TimingStats em;
  TimingStats bayes;
  double speedup = 0.0;        // EM mean / Bayesian mean
  double pct_reduction = 0.0;  // 100 (1 - Bayesian mean / EM mean)
};

inline TimingStats timing_stats(std::vector<double> s) {
  TimingStats t;
  t.samples = std::move(s);
  if (t.samples.empty()) return t;
  for (double v : t.samples) t.mean += v;
  t.mean /= static_cast<double>(t.samples.size());
  double ss = 0.0;
  for (double v : t.samples) ss += (v - t.mean) * (v - t.mean);
  t.sd = t.samples.size() > 1 ? std::sqrt(ss / static_cast<double>(t.samples.size() - 1)) : 0.0;
  return t;
}

/// Times two per-replication callables; each returns its own wall-clock seconds.
inline RuntimeSummary benchmark_methods(std::size_t reps, const std::function<double(std::size_t)>& em_fn,
                                        const std::function<double(std::size_t)>& bayes_fn) {
  std::vector<double> e, b;
  for (std::size_t r = 0; r < reps; ++r) {
    e.push_back(em_fn(r));
    b.push_back(bayes_fn(r));
  }
  RuntimeSummary s{timing_stats(std::move(e)), timing_stats(std::move(b)), 0.0, 0.0};
  if (s.bayes.mean > 0.0) s.speedup = s.em.mean / s.bayes.mean;
  if (s.em.mean > 0.0) s.pct_reduction = 100.0 * (1.0 - s.bayes.mean / s.em.mean);
  return s;
}

inline RuntimeSummary runtime_bench(const ScenarioConfig& cfg, std::size_t reps) {
  return benchmark_methods(
      reps, [&](std::size_t r) { return fit_em_cohort(cfg, simulate_cohort(cfg, r)).seconds; },
      [&](std::size_t r) { return fit_bayes(cfg, simulate_cohort(cfg, r), r).seconds; });
}

// ---------------------------------------------------------------------------
// Output files

inline void write_metrics_csv(std::ostream& out, const std::vector<MetricRow>& rows) {
  out << std::setprecision(10) << "method,param,truth,bias,sd,rmse,cp,n_used,n_failed\n";
  for (const auto& m : rows)
    out << m.method << ',' << m.param << ',' << m.truth << ',' << m.bias << ',' << m.sd << ',' << m.rmse << ',' << m.cp << ','
        << m.used << ',' << m.failed << '\n';
}

inline void write_rmse_curves_csv(std::ostream& out, const std::vector<CurvePoint>& rows) {
  out << std::setprecision(10) << "event_type,t,method,rmse\n";
  for (const auto& c : rows) out << c.event_type << ',' << c.t << ',' << c.method << ',' << c.value << '\n';
}

inline void write_overlay_csv(std::ostream& out, const std::vector<OverlayPoint>& rows) {
  out << std::setprecision(10) << "event_type,t,truth,estimate\n";
  for (const auto& o : rows) out << o.event_type << ',' << o.t << ',' << o.truth << ',' << o.estimate << '\n';
}

inline void write_rk_csv(std::ostream& out, const std::vector<RkRow>& rows) {
  out << std::setprecision(10) << "method,param,estimate_start1,estimate_start2,rk\n";
  for (const auto& r : rows) out << r.method << ',' << r.param << ',' << r.estimate_a << ',' << r.estimate_b << ',' << r.rk << '\n';
}

inline void write_runtime_csv(std::ostream& out, const RuntimeSummary& s) {
  out << std::setprecision(10) << "method,mean_seconds,sd_seconds,speedup,pct_reduction\n";
  out << "em," << s.em.mean << ',' << s.em.sd << ",,\n";
  out << "bayes," << s.bayes.mean << ',' << s.bayes.sd << ',' << s.speedup << ',' << s.pct_reduction << '\n';
}

/// Writes metrics.csv, rmse_curves.csv, overlay.csv and diagnostics.csv into `dir`
/// and returns the file names written.
inline std::vector<std::string> write_scenario_outputs(const std::filesystem::path& dir, const ScenarioResult& res) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> written;
  auto open = [&](const std::string& name) {
    std::ofstream f(dir / name);
    if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
    written.push_back(name);
    return f;
  };
  {
    auto f = open("metrics.csv");
    write_metrics_csv(f, res.metrics);
  }
  {
    auto f = open("rmse_curves.csv");
    write_rmse_curves_csv(f, res.rmse_curves);
  }
  {
    auto f = open("overlay.csv");
    write_overlay_csv(f, res.overlay);
  }
  if (!res.diagnostics.empty()) {
    auto f = open("diagnostics.csv");
    write_diagnostics_csv(f, DiagnosticsReport{res.diagnostics, 1.01, 0.10});
  }
  return written;
}

}  // namespace gaptide
