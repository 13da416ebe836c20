// gaptide command-line tool: simulate, fit, diagnose.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "gaptide/gaptide.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gaptide;

namespace {

enum ExitCode { kOk = 0, kRuntimeFailure = 1, kUserError = 2 };

class UserError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

int log_level() {
  const char* env = std::getenv("GAPTIDE_LOG");
  if (!env) return 1;
  const std::string v(env);
  if (v == "quiet" || v == "0") return 0;
  if (v == "debug" || v == "2") return 2;
  return 1;
}

void log_info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "gaptide: " << msg << '\n';
}

void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::cerr << "gaptide[debug]: " << msg << '\n';
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

struct Manifest {
  std::string command;
  json config;
  json seeds = json::object();
  std::vector<std::string> artifacts;
  std::string started = utc_now();

  void write(const fs::path& dir) const {
    json j;
    j["command"] = command;
    j["config"] = config;
    j["config_hash"] = fnv1a_hex(config.dump());
    j["seeds"] = seeds;
    j["artifacts"] = artifacts;
    j["version"] = kVersion;
    j["started"] = started;
    j["finished"] = utc_now();
    std::ofstream f(dir / "manifest.json");
    f << j.dump(2) << '\n';
  }
};

std::ofstream open_out(const fs::path& dir, const std::string& name, Manifest& m) {
  std::ofstream f(dir / name);
  if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
  m.artifacts.push_back(name);
  return f;
}

unsigned default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

struct ChainFlags {
  std::optional<std::size_t> iters, burnin, thin, chains;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app) {
    app->add_option("--iters", iters, "MCMC iterations per chain");
    app->add_option("--burnin", burnin, "burn-in iterations");
    app->add_option("--thin", thin, "thinning interval");
    app->add_option("--chains", chains, "number of chains");
    app->add_option("--seed", seed, "random seed");
  }
  void apply(ChainConfig& c) const {
    if (iters) c.iterations = *iters;
    if (burnin) c.burn_in = *burnin;
    if (thin) c.thin = *thin;
    if (chains) c.n_chains = *chains;
  }
};

// ---------------------------------------------------------------------------
// simulate

struct SimulateArgs {
  std::string config;
  std::string out;
  std::optional<std::size_t> reps;
  std::optional<unsigned> threads;
  std::string variant;
  std::size_t runtime_reps = 0;
  bool data_only = false;
  ChainFlags chain;
};

int cmd_simulate(const SimulateArgs& a) {
  ScenarioConfig cfg;
  try {
    cfg = load_scenario(a.config);
    a.chain.apply(cfg.chain);
    if (a.chain.seed) cfg.master_seed = *a.chain.seed;
    if (a.reps) cfg.n_replications = *a.reps;
    cfg.threads = a.threads.value_or(default_threads());
    cfg.validate();
  } catch (const std::exception& e) {
    throw UserError(std::string("invalid config: ") + e.what());
  }
  const fs::path out(a.out);
  fs::create_directories(out);
  Manifest m;
  m.command = "simulate";
  m.config = scenario_to_json(cfg);
  m.seeds["master_seed"] = cfg.master_seed;

  if (a.data_only) {
    const auto cohort = simulate_cohort(cfg, 0);
    auto f = open_out(out, "events.csv", m);
    write_events_csv(f, cohort);
    m.seeds["cohort_hash"] = cohort_hash(cohort);
    m.write(out);
    log_info("wrote simulated cohort to " + (out / "events.csv").string());
    return kOk;
  }

  auto progress = [&](std::size_t done) { log_debug("replication " + std::to_string(done) + "/" + std::to_string(cfg.n_replications)); };
  std::ofstream failures;
  auto log_failures = [&](const std::string& label, const ScenarioResult& res) {
    for (const auto& r : res.replications)
      for (const auto& [method, mr] : {std::pair<const char*, const MethodResult*>{"bayes", &r.bayes}, {"em", &r.em}}) {
        const bool ran = std::string(method) == "bayes" ? res.config.run_bayes : res.config.run_em;
        if (!ran || mr->ok) continue;
        if (!failures.is_open()) {
          failures = open_out(out, "failures.log", m);
        }
        failures << label << " replication " << r.index << " " << method << ": " << mr->error << '\n';
      }
  };

  if (a.variant.empty()) {
    log_info("running " + std::to_string(cfg.n_replications) + " replications of " + cfg.label);
    const auto res = run_scenario(cfg, progress);
    for (const auto& name : write_scenario_outputs(out, res)) m.artifacts.push_back(name);
    log_failures(cfg.label, res);
  } else {
    RobustnessVariant variant;
    try {
      variant = parse_variant(a.variant);
    } catch (const std::exception& e) {
      throw UserError(e.what());
    }
    log_info("running robustness study " + a.variant);
    const auto res = robustness_suite(cfg, variant);
    for (const auto& [label, run] : res.runs) {
      for (const auto& name : write_scenario_outputs(out / label, run)) m.artifacts.push_back(label + "/" + name);
      log_failures(label, run);
    }
    if (!res.rk.empty()) {
      auto f = open_out(out, "rk.csv", m);
      write_rk_csv(f, res.rk);
    }
  }
  if (a.runtime_reps > 0) {
    log_info("timing " + std::to_string(a.runtime_reps) + " replications per method");
    const auto rt = runtime_bench(cfg, a.runtime_reps);
    auto f = open_out(out, "runtime.csv", m);
    write_runtime_csv(f, rt);
  }
  m.write(out);
  return kOk;
}

// ---------------------------------------------------------------------------
// fit

struct FitArgs {
  std::string data;
  std::string method = "bayes";
  std::string grid = "data";
  std::string priors;
  std::string out;
  std::string time_scale = "calendar";
  std::optional<int> types;
  std::optional<unsigned> threads;
  ChainFlags chain;
};

GridSpec parse_grid(const std::string& s) {
  if (s == "data") return DataGrid{};
  const auto comma = s.find(',');
  if (comma == std::string::npos) throw UserError("--grid must be 'data' or 'step,horizon'");
  try {
    return StepGrid{std::stod(s.substr(0, comma)), std::stod(s.substr(comma + 1))};
  } catch (const std::exception&) {
    throw UserError("--grid must be 'data' or 'step,horizon'");
  }
}

/// Per-process event count divided by per-process exposure.
std::vector<double> crude_rates(const RiskSummary& rs, const Cohort& c) {
  std::vector<double> rate(rs.process_count(), 0.0);
  for (std::size_t k = 0; k < rs.process_count(); ++k) {
    double events = 0.0, exposure = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      const auto& s = c.subjects[i];
      events += rs.process(static_cast<int>(k)).subject_events[i];
      exposure += k == 0 ? s.window() : s.type(static_cast<int>(k)).completed_sum() + s.type(static_cast<int>(k)).residual;
    }
    rate[k] = exposure > 0.0 && events > 0.0 ? events / exposure : 1e-3;
  }
  return rate;
}

struct FitPriors {
  std::vector<GammaProcessPrior> gp;
  ParamPriors params;
  json description;
};

FitPriors load_fit_priors(const std::string& path, const RiskSummary& rs, const Cohort& cohort) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw UserError("cannot open priors file " + path);
    try {
      j = json::parse(in);
    } catch (const std::exception& e) {
      throw UserError(std::string("invalid priors file: ") + e.what());
    }
  }
  FitPriors fp;
  const std::size_t K = rs.process_count();
  const double c = j.value("c", 0.1);
  const std::string reference = j.value("reference", std::string("exponential"));
  try {
    std::vector<double> scales;
    double shape = 1.0;
    if (j.contains("reference_scales")) {
      scales = detail::per_process_scalars(j["reference_scales"], static_cast<std::size_t>(rs.q_count()));
    } else {
      for (double r : crude_rates(rs, cohort)) scales.push_back(1.0 / r);
    }
    if (reference == "weibull") shape = j.value("shape", 1.0);
    else if (reference != "exponential") throw UserError("unknown reference family " + reference);
    for (std::size_t k = 0; k < K; ++k) {
      const double scale = scales.at(k);
      fp.gp.push_back(GammaProcessPrior::from_cumulative(c, rs.grid(), [=](double t) { return t <= 0.0 ? 0.0 : std::pow(t / scale, shape); }));
    }
    fp.params.nu = j.contains("nu") ? detail::nu_prior_from_json(j["nu"]) : NuPrior{GammaNuPrior{2.0, 2.0}};
    fp.params.beta.assign(K, BetaPrior::isotropic(rs.covariates(), j.value("beta_var", 1.0)));
    fp.description = {{"c", c},
                      {"reference", reference},
                      {"shape", shape},
                      {"reference_scales", detail::per_process_json(scales)},
                      {"nu", detail::nu_prior_json(fp.params.nu)},
                      {"beta_var", j.value("beta_var", 1.0)}};
  } catch (const UserError&) {
    throw;
  } catch (const std::exception& e) {
    throw UserError(std::string("invalid priors: ") + e.what());
  }
  return fp;
}

void write_curves(std::ostream& out, const RiskSummary& rs, const std::vector<std::vector<double>>& cumhaz, double nu) {
  out << std::setprecision(12) << "event_type,t,cumhaz,survival\n";
  const auto& cuts = rs.grid().cuts();
  for (std::size_t pos = 0; pos < cumhaz.size(); ++pos) {
    const std::size_t k = pos + 1 < cumhaz.size() ? pos + 1 : 0;
    for (std::size_t j = 0; j < cuts.size(); ++j)
      out << k << ',' << cuts[j] << ',' << cumhaz[k][j] << ',' << survival_estimate(cumhaz[k][j], nu) << '\n';
  }
}

void write_frailties(std::ostream& out, const Cohort& c, const std::vector<double>& w) {
  out << std::setprecision(12) << "subject_id,w_hat\n";
  for (std::size_t i = 0; i < c.size(); ++i) out << c.subjects[i].subject_id << ',' << w[i] << '\n';
}

int cmd_fit(const FitArgs& a) {
  if (a.method != "bayes" && a.method != "em") throw UserError("--method must be bayes or em");
  CsvSchema schema;
  if (a.time_scale == "gap") schema.time_scale = TimeScale::gap;
  else if (a.time_scale != "calendar") throw UserError("--time-scale must be calendar or gap");
  schema.q_count = a.types;
  Cohort cohort;
  try {
    cohort = parse_events_csv(a.data, schema);
  } catch (const ValidationError& e) {
    std::cerr << "gaptide: data validation failed\n";
    for (const auto& v : e.violations())
      std::cerr << "  subject " << v.subject_id << (v.event_type >= 0 ? " type " + std::to_string(v.event_type) : std::string()) << ": "
                << v.rule << '\n';
    return kUserError;
  } catch (const ParseError& e) {
    throw UserError(e.what());
  } catch (const std::runtime_error& e) {
    throw UserError(e.what());
  }
  const GridSpec grid_spec = parse_grid(a.grid);
  PartitionGrid grid;
  RiskSummary rs;
  try {
    grid = build_grid(grid_spec, &cohort);
    rs = summarize(cohort, grid);
  } catch (const std::exception& e) {
    throw UserError(e.what());
  }
  log_info("loaded " + std::to_string(cohort.size()) + " subjects, " + std::to_string(cohort.q_count) + " recurrent type(s), " +
           std::to_string(grid.intervals()) + " grid intervals");

  const fs::path out(a.out);
  fs::create_directories(out);
  Manifest m;
  m.command = "fit";
  m.config = {{"data", a.data}, {"method", a.method}, {"grid", a.grid}, {"time_scale", a.time_scale}, {"types", cohort.q_count}};

  if (a.method == "em") {
    const auto fit = fit_em(rs);
    if (!fit.converged) log_info("EM stopped at the iteration limit without converging");
    m.config["em"] = {{"iterations", fit.iterations}, {"converged", fit.converged}};
    {
      auto f = open_out(out, "estimates.csv", m);
      write_em_csv(f, fit);
    }
    {
      auto f = open_out(out, "curves.csv", m);
      std::vector<std::vector<double>> cumhaz;
      for (std::size_t k = 0; k < rs.process_count(); ++k) cumhaz.push_back(fit.cumhaz(k));
      write_curves(f, rs, cumhaz, fit.nu);
    }
    {
      auto f = open_out(out, "frailty.csv", m);
      write_frailties(f, cohort, fit.w_hat);
    }
    m.write(out);
    return kOk;
  }

  const auto priors = load_fit_priors(a.priors, rs, cohort);
  ChainConfig cc;
  cc.iterations = 5000;
  cc.burn_in = 2000;
  cc.thin = 5;
  cc.n_chains = 1;
  a.chain.apply(cc);
  cc.seed = a.chain.seed.value_or(1);
  try {
    cc.validate();
  } catch (const std::exception& e) {
    throw UserError(e.what());
  }
  m.config["priors"] = priors.description;
  m.config["chain"] = {{"iterations", cc.iterations}, {"burn_in", cc.burn_in}, {"thin", cc.thin}, {"chains", cc.n_chains}};
  m.seeds["seed"] = cc.seed;
  const auto draws = run_chains(rs, priors.params, priors.gp, cc, a.threads.value_or(default_threads()));
  {
    auto f = open_out(out, "summary.csv", m);
    write_summary_csv(f, summarize_draws(draws));
  }
  {
    auto f = open_out(out, "draws.csv", m);
    write_draws_csv(f, draws);
  }
  {
    auto f = open_out(out, "curves.csv", m);
    double nu_mean = 0.0;
    for (const auto& ch : draws.chains) nu_mean += detail::mean_of(ch.values[0]);
    write_curves(f, rs, draws.mean_cumhaz(), nu_mean / static_cast<double>(draws.chains.size()));
  }
  {
    std::vector<double> w(cohort.size(), 0.0);
    for (const auto& ch : draws.chains)
      for (std::size_t i = 0; i < w.size(); ++i) w[i] += ch.mean_frailty[i] / static_cast<double>(draws.chains.size());
    auto f = open_out(out, "frailty.csv", m);
    write_frailties(f, cohort, w);
  }
  if (draws.chains.front().size() >= 4) {
    const auto rep = diagnose(draws);
    auto f = open_out(out, "diagnostics.csv", m);
    write_diagnostics_csv(f, rep);
    if (!rep.all_ok()) log_info("convergence thresholds not met; see diagnostics.csv");
  }
  m.write(out);
  return kOk;
}

// ---------------------------------------------------------------------------
// diagnose

struct DiagnoseArgs {
  std::string draws;
  std::string out;
  double rhat_max = 1.01;
  double ess_min = 0.10;
};

int cmd_diagnose(const DiagnoseArgs& a) {
  std::ifstream in(a.draws);
  if (!in) throw UserError("cannot open draws file " + a.draws);
  std::vector<std::pair<std::string, std::vector<std::vector<double>>>> by_param;
  try {
    by_param = read_draws_csv(in);
  } catch (const std::exception& e) {
    throw UserError(e.what());
  }
  if (by_param.empty()) throw UserError("draws file has no rows");
  DiagnosticsReport rep{{}, a.rhat_max, a.ess_min};
  for (const auto& [name, chains] : by_param) {
    if (chains.size() < 2) throw UserError("parameter " + name + " has a single chain; diagnostics need at least two");
    try {
      rep.rows.push_back(diagnose_parameter(name, chains));
    } catch (const std::invalid_argument& e) {
      throw UserError("parameter " + name + ": " + e.what());
    }
  }
  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write " + a.out);
  write_diagnostics_csv(f, rep);
  log_info(rep.all_ok() ? "all parameters pass" : "some parameters fail the convergence thresholds");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gaptide: joint frailty models for multitype recurrent and terminal events on the gap-time scale"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "run a simulation scenario from a JSON config");
  simulate->add_option("--config", sim.config, "scenario config (JSON)")->required();
  simulate->add_option("--out", sim.out, "output directory")->required();
  simulate->add_option("--reps", sim.reps, "number of replications");
  simulate->add_option("--threads", sim.threads, "worker threads");
  simulate->add_option("--variant", sim.variant, "robustness study: baseline_misspec, tiers, lognormal_nu, init_sensitivity");
  simulate->add_option("--runtime-reps", sim.runtime_reps, "also time this many replications per method");
  simulate->add_flag("--data-only", sim.data_only, "write the first simulated cohort as events.csv and stop");
  sim.chain.add(simulate);

  FitArgs fit;
  auto* fitcmd = app.add_subcommand("fit", "fit the model to an events CSV");
  fitcmd->add_option("--data", fit.data, "events CSV")->required();
  fitcmd->add_option("--method", fit.method, "bayes or em")->check(CLI::IsMember({"bayes", "em"}));
  fitcmd->add_option("--grid", fit.grid, "'data' or 'step,horizon'");
  fitcmd->add_option("--priors", fit.priors, "prior specification (JSON)");
  fitcmd->add_option("--out", fit.out, "output directory")->required();
  fitcmd->add_option("--time-scale", fit.time_scale, "calendar or gap")->check(CLI::IsMember({"calendar", "gap"}));
  fitcmd->add_option("--types", fit.types, "number of recurrent types");
  fitcmd->add_option("--threads", fit.threads, "worker threads");
  fit.chain.add(fitcmd);

  DiagnoseArgs diag;
  auto* diagcmd = app.add_subcommand("diagnose", "convergence diagnostics for a draws CSV");
  diagcmd->add_option("--draws", diag.draws, "draws CSV (chain,iter,param,value)")->required();
  diagcmd->add_option("--out", diag.out, "report CSV")->required();
  diagcmd->add_option("--rhat-max", diag.rhat_max, "R-hat threshold");
  diagcmd->add_option("--ess-min", diag.ess_min, "minimum ESS fraction");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUserError;
  }

  try {
    if (*simulate) return cmd_simulate(sim);
    if (*fitcmd) return cmd_fit(fit);
    if (*diagcmd) return cmd_diagnose(diag);
  } catch (const UserError& e) {
    std::cerr << "gaptide: " << e.what() << '\n';
    return kUserError;
  } catch (const std::exception& e) {
    std::cerr << "gaptide: failed: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return kUserError;
}
