#pragma once

// Likelihood, priors, conditional posteriors and closed-form estimators of the
// shared gamma-frailty joint model on the gap-time scale.
//
// Processes are indexed k = 0 (terminal) and k = 1..Q (recurrent types) in
// every container below.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <variant>
#include <vector>

#include "gaptide/riskset.hpp"

namespace gaptide {

inline double log_gamma(double x) { return boost::math::lgamma(x); }

struct GammaParams {
  double shape = 0.0;
  double rate = 1.0;
  /// Posterior mean; zero-shape is the point mass at zero.
  double mean() const { return shape > 0.0 ? shape / rate : 0.0; }
  double variance() const { return shape > 0.0 ? shape / (rate * rate) : 0.0; }
};

/// Gamma-process prior G(c, Lambda*) on one baseline cumulative hazard,
/// discretized to reference increments on the grid.
struct GammaProcessPrior {
  double c = 0.1;
  std::vector<double> reference_increments;  // Lambda*(t_j) - Lambda*(t_{j-1}), index j - 1

  static GammaProcessPrior from_cumulative(double c, const PartitionGrid& grid,
                                           const std::function<double(double)>& cumulative) {
    if (!(c > 0.0)) throw std::invalid_argument("gamma-process precision must be positive");
    GammaProcessPrior p;
    p.c = c;
    p.reference_increments.resize(grid.intervals());
    double prev = cumulative(0.0);
    for (std::size_t j = 1; j <= grid.intervals(); ++j) {
      const double cur = cumulative(grid.cut(j));
      const double inc = cur - prev;
      if (!(inc >= 0.0) || !std::isfinite(inc)) throw std::invalid_argument("reference cumulative hazard must be nondecreasing and finite");
      p.reference_increments[j - 1] = inc;
      prev = cur;
    }
    return p;
  }
};

struct GammaNuPrior {
  double shape = 2.0;
  double rate = 2.0;
};
struct LogNormalNuPrior {
  double meanlog = 0.0;
  double varlog = 1.0;
};
using NuPrior = std::variant<GammaNuPrior, LogNormalNuPrior>;

/// Normalized log density of the frailty-parameter prior.
inline double log_prior_nu(const NuPrior& prior, double nu) {
  if (!(nu > 0.0)) return -std::numeric_limits<double>::infinity();
  if (const auto* g = std::get_if<GammaNuPrior>(&prior))
    return g->shape * std::log(g->rate) - log_gamma(g->shape) + (g->shape - 1.0) * std::log(nu) - g->rate * nu;
  const auto& ln = std::get<LogNormalNuPrior>(prior);
  const double z = std::log(nu) - ln.meanlog;
  return -std::log(nu) - 0.5 * std::log(2.0 * std::numbers::pi * ln.varlog) - z * z / (2.0 * ln.varlog);
}

/// Multivariate normal prior on one regression vector. The log density drops
/// the normalizing constant: log pi(beta) = -(beta - mu)' Sigma^-1 (beta - mu) / 2.
class BetaPrior {
 public:
  BetaPrior() = default;
  BetaPrior(Eigen::VectorXd mean, const Eigen::MatrixXd& covariance) : mean_(std::move(mean)) {
    if (covariance.rows() != mean_.size() || covariance.cols() != mean_.size())
      throw std::invalid_argument("prior covariance dimension mismatch");
    if (!covariance.isApprox(covariance.transpose())) throw std::invalid_argument("prior covariance must be symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(covariance);
    if (llt.info() != Eigen::Success) throw std::invalid_argument("prior covariance must be positive definite");
    precision_ = llt.solve(Eigen::MatrixXd::Identity(mean_.size(), mean_.size()));
  }
  static BetaPrior isotropic(std::size_t p, double variance) {
    return BetaPrior(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p)),
                     variance * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p)));
  }

  const Eigen::VectorXd& mean() const { return mean_; }
  const Eigen::MatrixXd& precision() const { return precision_; }

  double log_density(const Eigen::VectorXd& beta) const {
    const Eigen::VectorXd d = beta - mean_;
    return -0.5 * d.dot(precision_ * d);
  }
  Eigen::VectorXd gradient(const Eigen::VectorXd& beta) const { return -(precision_ * (beta - mean_)); }

 private:
  Eigen::VectorXd mean_;
  Eigen::MatrixXd precision_;
};

struct ParamPriors {
  NuPrior nu = GammaNuPrior{};
  std::vector<BetaPrior> beta;  // per process k
};

struct ModelState {
  std::vector<std::vector<double>> increments;  // [k][j - 1]: Lambda_k(Delta t_(j)) >= 0
  std::vector<double> w;                        // frailties, > 0
  double nu = 1.0;
  std::vector<Eigen::VectorXd> beta;  // per process k
};

/// Cumulative sums with a leading zero: value at cut j for j = 0..M.
inline std::vector<double> cumulative_at_cuts(const std::vector<double>& increments) {
  std::vector<double> cum(increments.size() + 1, 0.0);
  for (std::size_t j = 0; j < increments.size(); ++j) cum[j + 1] = cum[j] + increments[j];
  return cum;
}

inline Eigen::VectorXd linear_predictor(const RiskSummary& rs, const Eigen::VectorXd& beta) {
  if (rs.covariates() == 0) return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(rs.subjects()));
  return rs.x() * beta;
}

/// sum_j Y_ki(t_j) Lambda_k(Delta t_j) for every subject (the exposure without
/// the covariate factor).
inline std::vector<double> baseline_exposure(const RiskSummary& rs, int k, const std::vector<double>& increments) {
  const auto cum = cumulative_at_cuts(increments);
  const auto& pr = rs.process(k);
  std::vector<double> out(rs.subjects(), 0.0);
  for (std::size_t i = 0; i < rs.subjects(); ++i) {
    double s = 0.0;
    for (auto e = pr.exposure_offset[i]; e < pr.exposure_offset[i + 1]; ++e) s += cum[pr.exposure_depth[e]];
    out[i] = s;
  }
  return out;
}

/// r_ki = exp(beta_k' x_i) sum_j Y_ki(t_j) Lambda_k(Delta t_j).
inline double exposure_r(const RiskSummary& rs, const ModelState& st, std::size_t i, int k) {
  const auto cum = cumulative_at_cuts(st.increments[static_cast<std::size_t>(k)]);
  const auto& pr = rs.process(k);
  double s = 0.0;
  for (auto e = pr.exposure_offset[i]; e < pr.exposure_offset[i + 1]; ++e) s += cum[pr.exposure_depth[e]];
  const double eta = rs.covariates() ? rs.x().row(static_cast<Eigen::Index>(i)).dot(st.beta[static_cast<std::size_t>(k)]) : 0.0;
  return std::exp(eta) * s;
}

/// Per-process exposures r_ki and the per-subject totals r_.i + r_0i.
struct Exposures {
  std::vector<std::vector<double>> base;  // [k][i]
  std::vector<std::vector<double>> r;     // [k][i]
  std::vector<double> total;              // [i]
};

inline Exposures compute_exposures(const RiskSummary& rs, const ModelState& st) {
  Exposures ex;
  const std::size_t K = rs.process_count();
  ex.base.resize(K);
  ex.r.resize(K);
  ex.total.assign(rs.subjects(), 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    ex.base[k] = baseline_exposure(rs, static_cast<int>(k), st.increments[k]);
    const Eigen::VectorXd eta = linear_predictor(rs, st.beta[k]);
    ex.r[k].resize(rs.subjects());
    for (std::size_t i = 0; i < rs.subjects(); ++i) {
      ex.r[k][i] = std::exp(eta[static_cast<Eigen::Index>(i)]) * ex.base[k][i];
      ex.total[i] += ex.r[k][i];
    }
  }
  return ex;
}

/// S_j = sum_i weight_i Y_ki(t_j) for j = 1..M (index j - 1).
inline std::vector<double> weighted_at_risk(const RiskSummary& rs, int k, const std::vector<double>& weight) {
  const std::size_t m = rs.intervals();
  const auto& pr = rs.process(k);
  std::vector<double> bucket(m + 1, 0.0);
  for (std::size_t i = 0; i < rs.subjects(); ++i)
    for (auto e = pr.exposure_offset[i]; e < pr.exposure_offset[i + 1]; ++e) bucket[pr.exposure_depth[e]] += weight[i];
  std::vector<double> out(m, 0.0);
  double acc = 0.0;
  for (std::size_t j = m; j >= 1; --j) {
    acc += bucket[j];
    out[j - 1] = acc;
  }
  return out;
}

/// Frailty-times-covariate weights W_i exp(beta_k' x_i).
inline std::vector<double> frailty_risk_weights(const RiskSummary& rs, const std::vector<double>& w, const Eigen::VectorXd& beta) {
  const Eigen::VectorXd eta = linear_predictor(rs, beta);
  std::vector<double> out(rs.subjects());
  for (std::size_t i = 0; i < rs.subjects(); ++i) out[i] = w[i] * std::exp(eta[static_cast<Eigen::Index>(i)]);
  return out;
}

/// Gamma conditional posterior of every increment of process k given W and beta_k.
inline std::vector<GammaParams> lambda_posterior_all(const RiskSummary& rs, const std::vector<double>& w,
                                                     const Eigen::VectorXd& beta, const GammaProcessPrior& prior, int k) {
  const auto risk = weighted_at_risk(rs, k, frailty_risk_weights(rs, w, beta));
  const auto& d = rs.process(k).events_per_interval;
  std::vector<GammaParams> out(rs.intervals());
  for (std::size_t j = 0; j < out.size(); ++j)
    out[j] = {d[j] + prior.c * prior.reference_increments[j], prior.c + risk[j]};
  return out;
}

inline GammaParams lambda_posterior_params(const RiskSummary& rs, const ModelState& st, const GammaProcessPrior& prior,
                                           int k, std::size_t j) {
  return lambda_posterior_all(rs, st.w, st.beta[static_cast<std::size_t>(k)], prior, k).at(j - 1);
}

/// Conditional posterior of W_i: Gamma(N_.i + N_0i + nu, r_.i + r_0i + nu).
inline GammaParams frailty_posterior(const RiskSummary& rs, const ModelState& st, std::size_t i) {
  double r = 0.0;
  for (std::size_t k = 0; k < rs.process_count(); ++k) r += exposure_r(rs, st, i, static_cast<int>(k));
  return {rs.total_events(i) + st.nu, r + st.nu};
}

inline double frailty_posterior_mean(const RiskSummary& rs, const ModelState& st, std::size_t i) {
  return frailty_posterior(rs, st, i).mean();
}

/// Posterior means of all frailties given exposure totals.
inline std::vector<double> frailty_posterior_means(const RiskSummary& rs, const std::vector<double>& total_exposure, double nu) {
  std::vector<double> out(rs.subjects());
  for (std::size_t i = 0; i < rs.subjects(); ++i) out[i] = (rs.total_events(i) + nu) / (total_exposure[i] + nu);
  return out;
}

enum class FrailtySource { current_draws, posterior_means };

/// Posterior-mean cumulative hazard of process k at every cut (index 0..M),
/// using either the current frailty draws or their posterior means.
inline std::vector<double> cumulative_hazard_estimate(const RiskSummary& rs, const ModelState& st, const GammaProcessPrior& prior,
                                                      int k, FrailtySource source) {
  std::vector<double> w = st.w;
  if (source == FrailtySource::posterior_means) w = frailty_posterior_means(rs, compute_exposures(rs, st).total, st.nu);
  const auto post = lambda_posterior_all(rs, w, st.beta[static_cast<std::size_t>(k)], prior, k);
  std::vector<double> cum(post.size() + 1, 0.0);
  for (std::size_t j = 0; j < post.size(); ++j) cum[j + 1] = cum[j] + post[j].mean();
  return cum;
}

/// Value of a cumulative curve stored at cuts, as the step function sum_{t_j <= t}.
inline double step_value(const PartitionGrid& grid, const std::vector<double>& at_cuts, double t) {
  if (t < 0.0) return 0.0;
  return at_cuts[std::min(grid.depth_of(t), at_cuts.size() - 1)];
}

inline double lambda_bayes_estimate(const RiskSummary& rs, const ModelState& st, const GammaProcessPrior& prior, int k,
                                    double t, FrailtySource source) {
  return step_value(rs.grid(), cumulative_hazard_estimate(rs, st, prior, k, source), t);
}

/// Log of the grid-reduced complete-data likelihood given frailties. Returns
/// -infinity when an event sits where the increment or the at-risk count is zero.
inline double log_complete_likelihood(const RiskSummary& rs, const ModelState& st) {
  const double neg_inf = -std::numeric_limits<double>::infinity();
  double value = 0.0;
  for (std::size_t k = 0; k < rs.process_count(); ++k) {
    const auto& pr = rs.process(static_cast<int>(k));
    const auto& inc = st.increments[k];
    const Eigen::VectorXd eta = linear_predictor(rs, st.beta[k]);
    const auto base = baseline_exposure(rs, static_cast<int>(k), inc);
    for (std::size_t i = 0; i < rs.subjects(); ++i) {
      const double e = eta[static_cast<Eigen::Index>(i)];
      for (auto ev = pr.event_offset[i]; ev < pr.event_offset[i + 1]; ++ev) {
        const std::size_t j = pr.event_interval[ev];
        const int y = rs.y_at(static_cast<int>(k), i, j);
        const double term = st.w[i] * y * inc[j - 1];
        if (!(term > 0.0)) return neg_inf;
        value += std::log(term) + e;
      }
      value -= st.w[i] * std::exp(e) * base[i];
    }
  }
  return value;
}

/// Log conditional posterior of nu with the frailties integrated out, from
/// per-subject event counts and total exposures. Includes the normalized prior.
inline double nu_log_posterior(const std::vector<double>& counts, const std::vector<double>& total_exposure, double nu,
                               const NuPrior& prior) {
  if (!(nu > 0.0) || !std::isfinite(nu)) return -std::numeric_limits<double>::infinity();
  const double lg_nu = log_gamma(nu);
  const double log_nu = std::log(nu);
  double s = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double a = counts[i] + nu;
    s += log_gamma(a) - lg_nu - a * std::log(total_exposure[i] + nu) + nu * log_nu;
  }
  return s + log_prior_nu(prior, nu);
}

inline std::vector<double> subject_event_totals(const RiskSummary& rs) {
  std::vector<double> out(rs.subjects());
  for (std::size_t i = 0; i < rs.subjects(); ++i) out[i] = rs.total_events(i);
  return out;
}

inline double log_cond_posterior_nu(const RiskSummary& rs, const ModelState& st, const ParamPriors& priors) {
  return nu_log_posterior(subject_event_totals(rs), compute_exposures(rs, st).total, st.nu, priors.nu);
}

/// Log conditional posterior of beta_k given frailties and baseline exposures
/// (prior constant dropped), optionally with its gradient.
inline double beta_log_posterior(const RiskSummary& rs, int k, const Eigen::VectorXd& beta, const std::vector<double>& w,
                                 const std::vector<double>& base, const BetaPrior& prior, Eigen::VectorXd* grad = nullptr) {
  const auto& pr = rs.process(k);
  const Eigen::VectorXd eta = linear_predictor(rs, beta);
  double value = prior.log_density(beta);
  if (grad) *grad = prior.gradient(beta);
  for (std::size_t i = 0; i < rs.subjects(); ++i) {
    const double e = eta[static_cast<Eigen::Index>(i)];
    const double hazard = w[i] * std::exp(e) * base[i];
    value += pr.subject_events[i] * e - hazard;
    if (grad && rs.covariates()) *grad += (pr.subject_events[i] - hazard) * rs.x().row(static_cast<Eigen::Index>(i)).transpose();
  }
  return value;
}

inline double log_cond_posterior_beta(const RiskSummary& rs, const ModelState& st, const ParamPriors& priors, int k) {
  const auto kk = static_cast<std::size_t>(k);
  return beta_log_posterior(rs, k, st.beta[kk], st.w, baseline_exposure(rs, k, st.increments[kk]), priors.beta[kk]);
}

inline Eigen::VectorXd score_cond_posterior_beta(const RiskSummary& rs, const ModelState& st, const ParamPriors& priors, int k) {
  const auto kk = static_cast<std::size_t>(k);
  Eigen::VectorXd g;
  beta_log_posterior(rs, k, st.beta[kk], st.w, baseline_exposure(rs, k, st.increments[kk]), priors.beta[kk], &g);
  return g;
}

/// Marginal (frailty-averaged) survival [nu / (nu + Lambda)]^nu.
inline double survival_estimate(double cumhaz, double nu) {
  if (!(cumhaz >= 0.0) || !(nu > 0.0)) throw std::domain_error("survival_estimate needs cumhaz >= 0 and nu > 0");
  return std::exp(-nu * std::log1p(cumhaz / nu));
}

/// Conditional survival exp(-w exp(beta'x) Lambda(t)).
inline double conditional_survival(double t, const std::function<double(double)>& cumhaz, double w,
                                   const Eigen::VectorXd& beta, const Eigen::VectorXd& x) {
  if (!(w > 0.0)) throw std::domain_error("frailty must be positive");
  if (t <= 0.0) return 1.0;
  return std::exp(-w * std::exp(beta.dot(x)) * cumhaz(t));
}

/// Correlation of successive gaps under an exponential baseline, defined for nu > 2.
inline double gap_correlation(double nu) {
  if (!(nu > 2.0)) throw std::domain_error("gap correlation requires nu > 2");
  return 1.0 / nu;
}

}  // namespace gaptide
