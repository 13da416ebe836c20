#pragma once

// Metropolis-within-Gibbs sampler for the joint frailty model.
//
// One iteration runs, in order:
//   (a) Gibbs draws of the recurrent-type hazard increments,
//   (b) Gibbs draws of the terminal hazard increments,
//   (c) exposures r_ki recomputed from the new increments,
//   (d) random-walk MH on log(nu), frailties integrated out,
//   (e) Gibbs draws of the frailties,
//   (f) block MH on each recurrent regression vector,
//   (g) block MH on the terminal regression vector.
// Step sizes adapt by Robbins-Monro during burn-in only and are frozen after.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "gaptide/model_core.hpp"
#include "gaptide/random.hpp"

namespace gaptide {

/// Robbins-Monro adaptation of a log proposal scale toward a target acceptance rate.
class StepAdapter {
 public:
  StepAdapter() = default;
  StepAdapter(double initial_scale, double target, double decay = 0.6)
      : log_scale_(std::log(initial_scale)), target_(target), decay_(decay) {}

  double scale() const { return std::exp(log_scale_); }
  double target() const { return target_; }

  void adapt(bool accepted) {
    ++updates_;
    const double gain = std::pow(static_cast<double>(updates_) + 10.0, -decay_);
    log_scale_ += gain * ((accepted ? 1.0 : 0.0) - target_);
    log_scale_ = std::clamp(log_scale_, -30.0, 10.0);
  }

 private:
  double log_scale_ = std::log(0.1);
  double target_ = 0.234;
  double decay_ = 0.6;
  std::size_t updates_ = 0;
};

struct MhOutcome {
  Eigen::VectorXd value;
  double log_target = 0.0;
  bool accepted = false;
};

/// One Gaussian random-walk Metropolis step on an unconstrained vector. The
/// log target must already include any Jacobian of the parameterization.
/// Non-finite proposal targets are rejected.
template <class LogTarget, class Rng>
MhOutcome mh_step(const Eigen::VectorXd& current, double current_log_target, LogTarget&& log_target, StepAdapter& step,
                  bool adapt, Rng& rng) {
  Eigen::VectorXd proposal = current;
  const double s = step.scale();
  for (Eigen::Index d = 0; d < proposal.size(); ++d) proposal[d] += s * standard_normal(rng);
  const double proposed = log_target(proposal);
  const double log_u = std::log(uniform_open(rng));
  const bool accept = std::isfinite(proposed) && log_u < proposed - current_log_target;
  if (adapt) step.adapt(accept);
  if (accept) return {std::move(proposal), proposed, true};
  return {current, current_log_target, false};
}

struct InitialValues {
  double nu = 3.0;
  std::vector<Eigen::VectorXd> beta;                            // per process; empty means zeros
  std::optional<std::vector<std::vector<double>>> increments;   // default: prior reference increments
};

struct MhConfig {
  double nu_log_step = 0.3;
  double beta_step = 0.15;
  double nu_target = 0.44;
  double beta_target = 0.234;
  double decay = 0.6;
};

enum class IncrementUpdate { draw, posterior_mean };
enum class FrailtyUpdate { draw, posterior_mean };

struct UpdateFlags {
  bool increments = true;
  bool nu = true;
  bool frailty = true;
  bool beta = true;
  IncrementUpdate increment_mode = IncrementUpdate::draw;
  FrailtyUpdate frailty_mode = FrailtyUpdate::draw;
};

struct ChainConfig {
  std::size_t iterations = 5000;
  std::size_t burn_in = 2000;
  std::size_t thin = 5;
  std::size_t n_chains = 1;
  std::uint64_t seed = 1;
  InitialValues init;
  MhConfig mh;
  UpdateFlags updates;
  bool keep_curves = false;
  bool keep_frailties = false;
  /// Called with the block label before each update of the first iteration.
  std::function<void(std::string_view)> trace;

  void validate() const {
    if (burn_in >= iterations) throw std::invalid_argument("burn-in must be smaller than the iteration count");
    if (thin < 1) throw std::invalid_argument("thin must be at least 1");
    if (n_chains < 1) throw std::invalid_argument("at least one chain is required");
  }
  std::size_t retained() const { return (iterations - burn_in) / thin; }
};

/// Parameter labels: nu, then beta{q}_{l} for q = 1..Q, then beta0_{l}.
inline std::vector<std::string> parameter_names(int q_count, std::size_t p) {
  std::vector<std::string> names{"nu"};
  auto add = [&](int k) {
    for (std::size_t l = 1; l <= p; ++l) names.push_back("beta" + std::to_string(k) + "_" + std::to_string(l));
  };
  for (int k = 1; k <= q_count; ++k) add(k);
  add(kTerminal);
  return names;
}

/// Flattens (nu, beta) in parameter_names order.
inline std::vector<double> flatten_parameters(double nu, const std::vector<Eigen::VectorXd>& beta) {
  std::vector<double> out{nu};
  const std::size_t K = beta.size();
  for (std::size_t k = 1; k < K; ++k) out.insert(out.end(), beta[k].data(), beta[k].data() + beta[k].size());
  out.insert(out.end(), beta[0].data(), beta[0].data() + beta[0].size());
  return out;
}

struct ChainDraws {
  std::vector<std::string> names;
  std::vector<std::vector<double>> values;  // [param][draw]
  std::vector<std::size_t> iterations;      // iteration number of each retained draw (1-based)
  std::vector<double> acceptance;           // per param: post-burn-in acceptance of its MH block
  std::vector<std::vector<double>> mean_cumhaz;                 // [k][cut 0..M], average plug-in estimate
  std::vector<double> mean_frailty;                             // average posterior-mean frailty
  std::vector<std::vector<std::vector<double>>> cumhaz_draws;   // [draw][k][cut], when requested
  std::vector<std::vector<double>> frailty_draws;               // [draw][i], when requested
  ModelState final_state;

  std::size_t size() const { return values.empty() ? 0 : values.front().size(); }
};

struct PosteriorDraws {
  std::vector<ChainDraws> chains;

  const std::vector<std::string>& names() const { return chains.at(0).names; }
  /// Per-chain sequences of one parameter.
  std::vector<std::vector<double>> parameter(std::size_t index) const {
    std::vector<std::vector<double>> out;
    for (const auto& c : chains) out.push_back(c.values.at(index));
    return out;
  }
  /// Average of the per-chain mean cumulative hazards.
  std::vector<std::vector<double>> mean_cumhaz() const {
    auto out = chains.at(0).mean_cumhaz;
    for (std::size_t c = 1; c < chains.size(); ++c)
      for (std::size_t k = 0; k < out.size(); ++k)
        for (std::size_t j = 0; j < out[k].size(); ++j) out[k][j] += chains[c].mean_cumhaz[k][j];
    for (auto& curve : out)
      for (double& v : curve) v /= static_cast<double>(chains.size());
    return out;
  }
};

namespace detail {

enum : std::uint64_t { kBlockIncrements = 0, kBlockNu = 1000, kBlockFrailty = 1001, kBlockBeta = 2000 };

inline const char* block_label(int k, bool beta) {
  static const std::vector<std::string> labels = [] {
    std::vector<std::string> v;
    for (int i = 0; i < 64; ++i) v.push_back("lambda" + std::to_string(i));
    for (int i = 0; i < 64; ++i) v.push_back("beta" + std::to_string(i));
    return v;
  }();
  return labels[static_cast<std::size_t>(k + (beta ? 64 : 0))].c_str();
}

}  // namespace detail

/// Runs one chain. Deterministic in (cfg.seed, chain_index) and the inputs.
inline ChainDraws run_chain(const RiskSummary& rs, const ParamPriors& priors, const std::vector<GammaProcessPrior>& gp,
                            const ChainConfig& cfg, std::size_t chain_index) {
  cfg.validate();
  const std::size_t n = rs.subjects();
  const std::size_t p = rs.covariates();
  const std::size_t K = rs.process_count();
  const std::size_t m = rs.intervals();
  if (gp.size() != K || priors.beta.size() != K) throw std::invalid_argument("one gamma-process and beta prior per process is required");
  for (const auto& g : gp)
    if (g.reference_increments.size() != m) throw std::invalid_argument("gamma-process prior does not match the grid");

  ModelState st;
  st.nu = cfg.init.nu;
  st.w.assign(n, 1.0);
  st.beta.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    st.beta[k] = (k < cfg.init.beta.size() && cfg.init.beta[k].size() > 0) ? cfg.init.beta[k]
                                                                           : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    if (static_cast<std::size_t>(st.beta[k].size()) != p) throw std::invalid_argument("initial beta has the wrong length");
  }
  if (cfg.init.increments) {
    st.increments = *cfg.init.increments;
  } else {
    st.increments.resize(K);
    for (std::size_t k = 0; k < K; ++k) st.increments[k] = gp[k].reference_increments;
  }

  const auto counts = subject_event_totals(rs);
  std::vector<std::vector<double>> base(K);
  std::vector<Eigen::VectorXd> eta(K);
  for (std::size_t k = 0; k < K; ++k) {
    base[k] = baseline_exposure(rs, static_cast<int>(k), st.increments[k]);
    eta[k] = linear_predictor(rs, st.beta[k]);
  }
  std::vector<double> total(n, 0.0);
  auto refresh_total = [&] {
    std::fill(total.begin(), total.end(), 0.0);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t i = 0; i < n; ++i) total[i] += std::exp(eta[k][static_cast<Eigen::Index>(i)]) * base[k][i];
  };
  refresh_total();

  auto nu_target = [&](const Eigen::VectorXd& log_nu) {
    const double nu = std::exp(log_nu[0]);
    return nu_log_posterior(counts, total, nu, priors.nu) + log_nu[0];
  };
  auto beta_target = [&](std::size_t k) {
    return [&, k](const Eigen::VectorXd& b) {
      return beta_log_posterior(rs, static_cast<int>(k), b, st.w, base[k], priors.beta[k]);
    };
  };

  {
    Eigen::VectorXd ln(1);
    ln[0] = std::log(st.nu);
    // beta first: the nu target depends on the linear predictors
    for (std::size_t k = 0; k < K; ++k)
      if (!std::isfinite(beta_target(k)(st.beta[k])))
        throw std::runtime_error("non-finite log posterior at initialization: beta" + std::to_string(k));
    if (!std::isfinite(nu_target(ln))) throw std::runtime_error("non-finite log posterior at initialization: nu");
  }

  StepAdapter nu_step(cfg.mh.nu_log_step, cfg.mh.nu_target, cfg.mh.decay);
  std::vector<StepAdapter> beta_step(K, StepAdapter(cfg.mh.beta_step, cfg.mh.beta_target, cfg.mh.decay));
  std::size_t nu_accepts = 0;
  std::vector<std::size_t> beta_accepts(K, 0);

  ChainDraws out;
  out.names = parameter_names(rs.q_count(), p);
  out.values.assign(out.names.size(), {});
  for (auto& v : out.values) v.reserve(cfg.retained());
  out.mean_cumhaz.assign(K, std::vector<double>(m + 1, 0.0));
  out.mean_frailty.assign(n, 0.0);

  auto update_increments = [&](std::size_t k, std::size_t iter) {
    const auto post = lambda_posterior_all(rs, st.w, st.beta[k], gp[k], static_cast<int>(k));
    auto rng = keyed_stream({cfg.seed, chain_index, iter, detail::kBlockIncrements + k});
    auto& inc = st.increments[k];
    for (std::size_t j = 0; j < m; ++j)
      inc[j] = cfg.updates.increment_mode == IncrementUpdate::draw ? gamma_draw(rng, post[j].shape, post[j].rate) : post[j].mean();
  };

  for (std::size_t iter = 1; iter <= cfg.iterations; ++iter) {
    const bool adapting = iter <= cfg.burn_in;
    auto mark = [&](std::string_view label) {
      if (iter == 1 && cfg.trace) cfg.trace(label);
    };

    // (a), (b)
    for (std::size_t k = 1; k < K; ++k) {
      mark(detail::block_label(static_cast<int>(k), false));
      if (cfg.updates.increments) update_increments(k, iter);
    }
    mark(detail::block_label(kTerminal, false));
    if (cfg.updates.increments) update_increments(0, iter);

    // (c)
    mark("exposure");
    for (std::size_t k = 0; k < K; ++k) base[k] = baseline_exposure(rs, static_cast<int>(k), st.increments[k]);
    refresh_total();

    // (d)
    mark("nu");
    if (cfg.updates.nu) {
      auto rng = keyed_stream({cfg.seed, chain_index, iter, detail::kBlockNu});
      Eigen::VectorXd ln(1);
      ln[0] = std::log(st.nu);
      auto res = mh_step(ln, nu_target(ln), nu_target, nu_step, adapting, rng);
      st.nu = std::exp(res.value[0]);
      if (!adapting && res.accepted) ++nu_accepts;
    }

    // (e)
    mark("frailty");
    if (cfg.updates.frailty) {
      auto rng = keyed_stream({cfg.seed, chain_index, iter, detail::kBlockFrailty});
      for (std::size_t i = 0; i < n; ++i) {
        const double shape = counts[i] + st.nu;
        const double rate = total[i] + st.nu;
        st.w[i] = cfg.updates.frailty_mode == FrailtyUpdate::draw ? gamma_draw(rng, shape, rate) : shape / rate;
        // Guard against underflow of tiny-shape draws.
        if (!(st.w[i] > 0.0)) st.w[i] = std::numeric_limits<double>::min();
      }
    }

    // (f), (g)
    auto update_beta = [&](std::size_t k) {
      mark(detail::block_label(static_cast<int>(k), true));
      if (!cfg.updates.beta || p == 0) return;
      auto rng = keyed_stream({cfg.seed, chain_index, iter, detail::kBlockBeta + k});
      auto target = beta_target(k);
      auto res = mh_step(st.beta[k], target(st.beta[k]), target, beta_step[k], adapting, rng);
      if (res.accepted) {
        st.beta[k] = std::move(res.value);
        eta[k] = linear_predictor(rs, st.beta[k]);
        if (!adapting) ++beta_accepts[k];
      }
    };
    for (std::size_t k = 1; k < K; ++k) update_beta(k);
    update_beta(0);

    if (iter > cfg.burn_in && (iter - cfg.burn_in) % cfg.thin == 0) {
      const auto flat = flatten_parameters(st.nu, st.beta);
      for (std::size_t d = 0; d < flat.size(); ++d) out.values[d].push_back(flat[d]);
      out.iterations.push_back(iter);

      refresh_total();
      const auto w_hat = frailty_posterior_means(rs, total, st.nu);
      std::vector<std::vector<double>> curves(K);
      for (std::size_t k = 0; k < K; ++k) {
        const auto post = lambda_posterior_all(rs, w_hat, st.beta[k], gp[k], static_cast<int>(k));
        curves[k].assign(m + 1, 0.0);
        for (std::size_t j = 0; j < m; ++j) curves[k][j + 1] = curves[k][j] + post[j].mean();
        for (std::size_t j = 0; j <= m; ++j) out.mean_cumhaz[k][j] += curves[k][j];
      }
      for (std::size_t i = 0; i < n; ++i) out.mean_frailty[i] += w_hat[i];
      if (cfg.keep_curves) out.cumhaz_draws.push_back(std::move(curves));
      if (cfg.keep_frailties) out.frailty_draws.push_back(w_hat);
    }
  }

  const double kept = static_cast<double>(std::max<std::size_t>(out.size(), 1));
  for (auto& curve : out.mean_cumhaz)
    for (double& v : curve) v /= kept;
  for (double& v : out.mean_frailty) v /= kept;

  const double post_iters = static_cast<double>(cfg.iterations - cfg.burn_in);
  out.acceptance.push_back(static_cast<double>(nu_accepts) / post_iters);
  for (std::size_t k = 1; k < K; ++k)
    for (std::size_t l = 0; l < p; ++l) out.acceptance.push_back(static_cast<double>(beta_accepts[k]) / post_iters);
  for (std::size_t l = 0; l < p; ++l) out.acceptance.push_back(static_cast<double>(beta_accepts[0]) / post_iters);
  out.final_state = std::move(st);
  return out;
}

/// Runs cfg.n_chains chains, in parallel when threads > 1. Output does not
/// depend on the thread count.
inline PosteriorDraws run_chains(const RiskSummary& rs, const ParamPriors& priors, const std::vector<GammaProcessPrior>& gp,
                                 const ChainConfig& cfg, unsigned threads = 1) {
  PosteriorDraws out;
  out.chains.resize(cfg.n_chains);
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(cfg.n_chains);
  auto worker = [&] {
    for (std::size_t c = next++; c < cfg.n_chains; c = next++) {
      try {
        out.chains[c] = run_chain(rs, priors, gp, cfg, c);
      } catch (...) {
        errors[c] = std::current_exception();
      }
    }
  };
  const unsigned n_threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(cfg.n_chains)));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

/// Type-7 (linear interpolation) quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& sorted, double prob) {
  if (sorted.empty()) throw std::invalid_argument("quantile of empty data");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct ParameterSummary {
  std::string name;
  double mean = 0.0;
  double sd = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  double accept_rate = 0.0;
};

/// Summary of pooled draws: mean, sample SD, equal-tailed interval.
inline ParameterSummary summarize_values(std::string name, std::vector<double> pooled, double level) {
  if (pooled.empty()) throw std::invalid_argument("cannot summarize empty draws");
  ParameterSummary s;
  s.name = std::move(name);
  // centered on the first draw so constant draws give an exact mean and zero sd
  const double shift = pooled.front();
  double sum = 0.0;
  for (double v : pooled) sum += v - shift;
  s.mean = shift + sum / static_cast<double>(pooled.size());
  double ss = 0.0;
  for (double v : pooled) ss += (v - s.mean) * (v - s.mean);
  s.sd = pooled.size() > 1 ? std::sqrt(ss / static_cast<double>(pooled.size() - 1)) : 0.0;
  std::sort(pooled.begin(), pooled.end());
  s.lower = quantile_sorted(pooled, (1.0 - level) / 2.0);
  s.upper = quantile_sorted(pooled, (1.0 + level) / 2.0);
  return s;
}

inline std::vector<ParameterSummary> summarize_draws(const PosteriorDraws& d, double level = 0.95) {
  if (d.chains.empty() || d.chains.front().size() == 0) throw std::invalid_argument("cannot summarize empty draws");
  std::vector<ParameterSummary> out;
  for (std::size_t p = 0; p < d.names().size(); ++p) {
    std::vector<double> pooled;
    double acc = 0.0;
    for (const auto& c : d.chains) {
      pooled.insert(pooled.end(), c.values[p].begin(), c.values[p].end());
      acc += p < c.acceptance.size() ? c.acceptance[p] : 0.0;
    }
    auto s = summarize_values(d.names()[p], std::move(pooled), level);
    s.accept_rate = acc / static_cast<double>(d.chains.size());
    out.push_back(std::move(s));
  }
  return out;
}

/// Long-format draws export: chain,iter,param,value.
inline void write_draws_csv(std::ostream& out, const PosteriorDraws& d) {
  out << std::setprecision(17) << "chain,iter,param,value\n";
  for (std::size_t c = 0; c < d.chains.size(); ++c) {
    const auto& ch = d.chains[c];
    for (std::size_t s = 0; s < ch.size(); ++s)
      for (std::size_t p = 0; p < ch.names.size(); ++p)
        out << (c + 1) << ',' << ch.iterations[s] << ',' << ch.names[p] << ',' << ch.values[p][s] << '\n';
  }
}

/// Reads draws written by write_draws_csv: per parameter (in order of first
/// appearance) the per-chain sequences in file order.
inline std::vector<std::pair<std::string, std::vector<std::vector<double>>>> read_draws_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty draws file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "chain,iter,param,value") throw std::runtime_error("draws header must be chain,iter,param,value");
  std::vector<std::string> order;
  std::map<std::string, std::map<long, std::vector<double>>> by_param;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string chain, iter, param, value;
    if (!std::getline(ss, chain, ',') || !std::getline(ss, iter, ',') || !std::getline(ss, param, ',') || !std::getline(ss, value))
      throw std::runtime_error("malformed draws row at line " + std::to_string(line_no));
    if (!by_param.count(param)) order.push_back(param);
    try {
      by_param[param][std::stol(chain)].push_back(std::stod(value));
    } catch (const std::exception&) {
      throw std::runtime_error("malformed draws row at line " + std::to_string(line_no));
    }
  }
  std::vector<std::pair<std::string, std::vector<std::vector<double>>>> out;
  for (const auto& name : order) {
    out.emplace_back(name, std::vector<std::vector<double>>{});
    for (auto& [c, seq] : by_param[name]) out.back().second.push_back(std::move(seq));
  }
  return out;
}

/// Summary export: param,mean,sd,lower,upper,accept_rate,hr (hr = exp(mean) for regression effects).
inline void write_summary_csv(std::ostream& out, const std::vector<ParameterSummary>& rows) {
  out << std::setprecision(17) << "param,mean,sd,lower,upper,accept_rate,hr\n";
  for (const auto& r : rows) {
    out << r.name << ',' << r.mean << ',' << r.sd << ',' << r.lower << ',' << r.upper << ',' << r.accept_rate << ',';
    if (r.name != "nu") out << std::exp(r.mean);
    out << '\n';
  }
}

}  // namespace gaptide
