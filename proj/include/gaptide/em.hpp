#pragma once

// Frequentist EM comparator for the shared gamma-frailty model: E-step
// frailty weights, Breslow-type hazard sums, Newton M-step for each
// regression vector, 1-D M-step for nu, and Wald intervals from a numerical
// Hessian of the marginal likelihood with the hazards profiled out.

#include <Eigen/Dense>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gaptide/model_core.hpp"
#include "gaptide/sampler.hpp"

namespace gaptide {

/// Breslow sum with an event but an empty risk set, or a failed M-step.
class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NewtonError : public EstimationError {
 public:
  NewtonError(const std::string& what, Eigen::VectorXd last) : EstimationError(what), last_iterate(std::move(last)) {}
  Eigen::VectorXd last_iterate;
};

struct EmConfig {
  std::size_t max_iter = 500;
  double tol = 1e-6;
  double nu_init = 3.0;
  std::vector<Eigen::VectorXd> beta_init;  // per process; empty means zeros
  double nu_min = 0.01;
  double nu_max = 50.0;
  bool compute_se = true;
  int newton_max = 50;
  double grad_tol = 1e-8;

  void validate() const {
    if (!(tol > 0.0)) throw std::invalid_argument("EM tolerance must be positive");
    if (!(nu_min > 0.0) || !(nu_max > nu_min)) throw std::invalid_argument("EM nu bounds must satisfy 0 < min < max");
    if (!(nu_init > 0.0)) throw std::invalid_argument("EM initial nu must be positive");
  }
};

struct EmFit {
  std::vector<std::string> names;
  double nu = 0.0;
  std::vector<Eigen::VectorXd> beta;
  std::vector<std::vector<double>> increments;  // [k][j - 1]
  std::vector<double> w_hat;
  std::size_t iterations = 0;
  bool converged = false;
  double log_likelihood = 0.0;
  std::vector<double> estimate;  // flattened in names order
  std::vector<double> se;        // NaN when the Hessian is not negative definite

  std::vector<double> cumhaz(std::size_t k) const { return cumulative_at_cuts(increments.at(k)); }
  double lower(std::size_t d) const { return estimate[d] - 1.959963984540054 * se[d]; }
  double upper(std::size_t d) const { return estimate[d] + 1.959963984540054 * se[d]; }
  /// NaN standard errors never cover.
  bool covers(std::size_t d, double truth) const { return std::isfinite(se[d]) && lower(d) <= truth && truth <= upper(d); }
};

struct EStep {
  std::vector<double> w_hat;
  std::vector<double> elogw;
};

/// Conditional Gamma(N + nu, r + nu) mean and log-mean of each frailty.
inline EStep e_step(const std::vector<double>& counts, const std::vector<double>& total_exposure, double nu) {
  if (!(nu > 0.0)) throw std::domain_error("e_step needs nu > 0");
  EStep e;
  e.w_hat.resize(counts.size());
  e.elogw.resize(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double a = counts[i] + nu;
    const double b = total_exposure[i] + nu;
    e.w_hat[i] = a / b;
    e.elogw[i] = boost::math::digamma(a) - std::log(b);
  }
  return e;
}

inline EStep e_step(const RiskSummary& rs, const ModelState& st) {
  return e_step(subject_event_totals(rs), compute_exposures(rs, st).total, st.nu);
}

/// Breslow increments of process k given weights w_hat and beta_k.
inline std::vector<double> breslow_update(const RiskSummary& rs, int k, const Eigen::VectorXd& beta, const std::vector<double>& w_hat) {
  const auto risk = weighted_at_risk(rs, k, frailty_risk_weights(rs, w_hat, beta));
  const auto& d = rs.process(k).events_per_interval;
  std::vector<double> inc(rs.intervals(), 0.0);
  for (std::size_t j = 0; j < inc.size(); ++j) {
    if (d[j] == 0.0) continue;
    if (!(risk[j] > 0.0))
      throw EstimationError("event with an empty risk set in interval " + std::to_string(j + 1) + " of process " + std::to_string(k));
    inc[j] = d[j] / risk[j];
  }
  return inc;
}

struct BetaStep {
  Eigen::VectorXd beta;
  bool flat = false;
  int steps = 0;
};

namespace detail {

/// Weighted log partial likelihood sum_i N_i beta'x_i - sum_j d_j log S0_j with
/// S0_j = sum_i w_i exp(beta'x_i) Y_i(t_j), plus gradient and Hessian.
inline double partial_likelihood(const RiskSummary& rs, int k, const Eigen::VectorXd& beta, const std::vector<double>& w,
                                 Eigen::VectorXd* grad, Eigen::MatrixXd* hess) {
  const std::size_t m = rs.intervals();
  const auto p = static_cast<Eigen::Index>(rs.covariates());
  const auto& pr = rs.process(k);
  const Eigen::VectorXd eta = linear_predictor(rs, beta);
  std::vector<double> s0(m + 1, 0.0);
  Eigen::MatrixXd s1 = Eigen::MatrixXd::Zero(p, static_cast<Eigen::Index>(m + 1));
  std::vector<Eigen::MatrixXd> s2;
  if (hess) s2.assign(m + 1, Eigen::MatrixXd::Zero(p, p));
  double value = 0.0;
  Eigen::VectorXd g = Eigen::VectorXd::Zero(p);
  for (std::size_t i = 0; i < rs.subjects(); ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    const double a = w[i] * std::exp(eta[ii]);
    const Eigen::VectorXd xi = rs.x().row(ii).transpose();
    value += pr.subject_events[i] * eta[ii];
    g += pr.subject_events[i] * xi;
    for (auto e = pr.exposure_offset[i]; e < pr.exposure_offset[i + 1]; ++e) {
      const auto depth = pr.exposure_depth[e];
      s0[depth] += a;
      s1.col(depth) += a * xi;
      if (hess) s2[depth] += a * xi * xi.transpose();
    }
  }
  // Suffix sums: at-risk at cut j means depth >= j.
  for (std::size_t j = m; j-- > 1;) {
    s0[j] += s0[j + 1];
    s1.col(static_cast<Eigen::Index>(j)) += s1.col(static_cast<Eigen::Index>(j + 1));
    if (hess) s2[j] += s2[j + 1];
  }
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(p, p);
  for (std::size_t j = 1; j <= m; ++j) {
    const double d = pr.events_per_interval[j - 1];
    if (d == 0.0) continue;
    if (!(s0[j] > 0.0)) return -std::numeric_limits<double>::infinity();
    const Eigen::VectorXd mean = s1.col(static_cast<Eigen::Index>(j)) / s0[j];
    value -= d * std::log(s0[j]);
    g -= d * mean;
    if (hess) h -= d * (s2[j] / s0[j] - mean * mean.transpose());
  }
  if (grad) *grad = g;
  if (hess) *hess = h;
  return value;
}

}  // namespace detail

/// Newton iteration with step halving on the frailty-weighted partial
/// likelihood of process k. A likelihood without curvature returns the start
/// flagged as flat.
inline BetaStep m_step_beta(const RiskSummary& rs, int k, const std::vector<double>& w_hat, const Eigen::VectorXd& start,
                            int max_steps = 50, double grad_tol = 1e-8) {
  BetaStep out{start, false, 0};
  if (start.size() == 0) return out;
  Eigen::VectorXd g;
  Eigen::MatrixXd h;
  double value = detail::partial_likelihood(rs, k, out.beta, w_hat, &g, &h);
  if (!std::isfinite(value)) throw EstimationError("partial likelihood is not finite at the starting beta");
  const double scale = std::max(1.0, h.cwiseAbs().maxCoeff());
  for (; out.steps < max_steps; ++out.steps) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(-h);
    const bool pd = ldlt.info() == Eigen::Success && ldlt.isPositive() && ldlt.vectorD().minCoeff() > 1e-12 * scale;
    if (!pd && out.steps == 0) {
      out.flat = true;
      return out;
    }
    if (g.norm() < grad_tol) return out;
    if (!pd) throw NewtonError("beta M-step Hessian is not negative definite", out.beta);
    const Eigen::VectorXd dir = ldlt.solve(g);
    double t = 1.0;
    bool moved = false;
    for (int half = 0; half < 40; ++half, t *= 0.5) {
      const Eigen::VectorXd cand = out.beta + t * dir;
      Eigen::VectorXd gc;
      Eigen::MatrixXd hc;
      const double vc = detail::partial_likelihood(rs, k, cand, w_hat, &gc, &hc);
      if (std::isfinite(vc) && vc >= value - 1e-12 * std::abs(value)) {
        out.beta = cand;
        value = vc;
        g = gc;
        h = hc;
        moved = true;
        break;
      }
    }
    if (!moved) {
      if (g.norm() < std::sqrt(grad_tol)) return out;
      throw NewtonError("beta M-step line search failed", out.beta);
    }
  }
  if (g.norm() < grad_tol) return out;
  throw NewtonError("beta M-step did not converge in " + std::to_string(max_steps) + " Newton steps", out.beta);
}

/// Maximizes sum_i [nu log nu - lgamma nu + (nu - 1) elogw_i - nu w_i] over [lo, hi].
inline double m_step_nu(const std::vector<double>& w_hat, const std::vector<double>& elogw, double lo = 0.01, double hi = 50.0) {
  const double n = static_cast<double>(w_hat.size());
  if (w_hat.empty()) throw std::domain_error("m_step_nu needs at least one subject");
  double s = 0.0;
  for (std::size_t i = 0; i < w_hat.size(); ++i) s += elogw[i] - w_hat[i];
  auto score = [&](double v) { return n * (std::log(v) + 1.0 - boost::math::digamma(v)) + s; };
  auto curvature = [&](double v) { return n * (1.0 / v - boost::math::trigamma(v)); };
  if (score(lo) <= 0.0) return lo;
  if (score(hi) >= 0.0) return hi;
  // Concave objective: the score is decreasing, keep a sign bracket.
  double a = lo, b = hi;
  double v = std::sqrt(lo * hi);
  for (int it = 0; it < 200; ++it) {
    const double f = score(v);
    if (f > 0.0) a = v;
    else b = v;
    double next = v - f / curvature(v);
    if (!(next > a && next < b)) next = 0.5 * (a + b);
    if (std::abs(next - v) <= 1e-12 * std::max(1.0, v)) return next;
    v = next;
  }
  return v;
}

/// Observed-data marginal log-likelihood with frailties integrated out, up to
/// a constant free of the parameters.
inline double marginal_log_likelihood(const RiskSummary& rs, const ModelState& st) {
  const auto counts = subject_event_totals(rs);
  const auto total = compute_exposures(rs, st).total;
  double value = 0.0;
  const double lg_nu = log_gamma(st.nu);
  const double log_nu = std::log(st.nu);
  for (std::size_t i = 0; i < rs.subjects(); ++i) {
    const double a = counts[i] + st.nu;
    value += log_gamma(a) - lg_nu + st.nu * log_nu - a * std::log(total[i] + st.nu);
  }
  for (std::size_t k = 0; k < rs.process_count(); ++k) {
    const auto& pr = rs.process(static_cast<int>(k));
    const Eigen::VectorXd eta = linear_predictor(rs, st.beta[k]);
    for (std::size_t i = 0; i < rs.subjects(); ++i) value += pr.subject_events[i] * eta[static_cast<Eigen::Index>(i)];
    for (std::size_t j = 0; j < rs.intervals(); ++j) {
      const double d = pr.events_per_interval[j];
      if (d == 0.0) continue;
      if (!(st.increments[k][j] > 0.0)) return -std::numeric_limits<double>::infinity();
      value += d * std::log(st.increments[k][j]);
    }
  }
  return value;
}

/// Profiles the hazards out of the marginal likelihood at fixed (nu, beta) by
/// iterating the Breslow/E-step fixed point from the increments in `st`.
inline double profile_log_likelihood(const RiskSummary& rs, ModelState& st, int max_iter = 5000, double tol = 1e-11) {
  const auto counts = subject_event_totals(rs);
  for (int it = 0; it < max_iter; ++it) {
    const auto e = e_step(counts, compute_exposures(rs, st).total, st.nu);
    double change = 0.0;
    for (std::size_t k = 0; k < rs.process_count(); ++k) {
      auto inc = breslow_update(rs, static_cast<int>(k), st.beta[k], e.w_hat);
      for (std::size_t j = 0; j < inc.size(); ++j)
        change = std::max(change, std::abs(inc[j] - st.increments[k][j]) / std::max(inc[j], 1e-300));
      st.increments[k] = std::move(inc);
    }
    if (change < tol) break;
  }
  return marginal_log_likelihood(rs, st);
}

namespace detail {

inline ModelState unflatten(const ModelState& like, const std::vector<double>& theta) {
  ModelState st = like;
  st.nu = theta[0];
  const std::size_t K = st.beta.size();
  std::size_t pos = 1;
  auto fill = [&](std::size_t k) {
    for (Eigen::Index l = 0; l < st.beta[k].size(); ++l) st.beta[k][l] = theta[pos++];
  };
  for (std::size_t k = 1; k < K; ++k) fill(k);
  fill(0);
  return st;
}

}  // namespace detail

/// Standard errors from a central-difference Hessian of the profile marginal
/// log-likelihood over (nu, beta). NaN when the negated Hessian is not positive definite.
inline std::vector<double> profile_standard_errors(const RiskSummary& rs, const ModelState& fitted) {
  const auto theta = flatten_parameters(fitted.nu, fitted.beta);
  const std::size_t d = theta.size();
  std::vector<double> h(d);
  for (std::size_t a = 0; a < d; ++a) h[a] = 1e-3 * std::max(1.0, std::abs(theta[a]));
  if (theta[0] - h[0] <= 0.0) h[0] = 0.5 * theta[0];
  auto eval = [&](std::vector<double> t) {
    ModelState st = detail::unflatten(fitted, t);
    return profile_log_likelihood(rs, st);
  };
  const double f0 = eval(theta);
  Eigen::MatrixXd hess(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (std::size_t a = 0; a < d; ++a) {
    auto tp = theta, tm = theta;
    tp[a] += h[a];
    tm[a] -= h[a];
    hess(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(a)) = (eval(tp) - 2.0 * f0 + eval(tm)) / (h[a] * h[a]);
    for (std::size_t b = 0; b < a; ++b) {
      auto pp = theta, pm = theta, mp = theta, mm = theta;
      pp[a] += h[a]; pp[b] += h[b];
      pm[a] += h[a]; pm[b] -= h[b];
      mp[a] -= h[a]; mp[b] += h[b];
      mm[a] -= h[a]; mm[b] -= h[b];
      const double v = (eval(pp) - eval(pm) - eval(mp) + eval(mm)) / (4.0 * h[a] * h[b]);
      hess(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = v;
      hess(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) = v;
    }
  }
  std::vector<double> se(d, std::numeric_limits<double>::quiet_NaN());
  Eigen::LLT<Eigen::MatrixXd> llt(-hess);
  if (llt.info() != Eigen::Success || !hess.allFinite()) return se;
  const Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(hess.rows(), hess.cols()));
  for (std::size_t a = 0; a < d; ++a) {
    const double v = cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(a));
    if (v > 0.0) se[a] = std::sqrt(v);
  }
  return se;
}

/// EM iterations {E-step, Breslow, beta M-steps, Breslow, nu M-step} until the
/// largest relative change of (nu, beta, Lambda(horizon)) is below tol.
inline EmFit fit_em(const RiskSummary& rs, const EmConfig& cfg = {}) {
  cfg.validate();
  const std::size_t K = rs.process_count();
  const std::size_t p = rs.covariates();
  const auto counts = subject_event_totals(rs);

  ModelState st;
  st.nu = std::clamp(cfg.nu_init, cfg.nu_min, cfg.nu_max);
  st.beta.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    st.beta[k] = k < cfg.beta_init.size() && cfg.beta_init[k].size() > 0 ? cfg.beta_init[k] : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    if (static_cast<std::size_t>(st.beta[k].size()) != p) throw std::invalid_argument("initial beta has the wrong length");
  }
  st.w.assign(rs.subjects(), 1.0);
  st.increments.resize(K);
  for (std::size_t k = 0; k < K; ++k) st.increments[k] = breslow_update(rs, static_cast<int>(k), st.beta[k], st.w);

  auto snapshot = [&] {
    auto v = flatten_parameters(st.nu, st.beta);
    for (const auto& inc : st.increments) {
      double s = 0.0;
      for (double x : inc) s += x;
      v.push_back(s);
    }
    return v;
  };

  EmFit fit;
  fit.names = parameter_names(rs.q_count(), p);
  auto prev = snapshot();
  for (std::size_t it = 1; it <= cfg.max_iter; ++it) {
    fit.iterations = it;
    const auto e = e_step(counts, compute_exposures(rs, st).total, st.nu);
    for (std::size_t k = 0; k < K; ++k) {
      const int kk = static_cast<int>(k);
      st.increments[k] = breslow_update(rs, kk, st.beta[k], e.w_hat);
      st.beta[k] = m_step_beta(rs, kk, e.w_hat, st.beta[k], cfg.newton_max, cfg.grad_tol).beta;
      st.increments[k] = breslow_update(rs, kk, st.beta[k], e.w_hat);
    }
    st.nu = m_step_nu(e.w_hat, e.elogw, cfg.nu_min, cfg.nu_max);

    const auto cur = snapshot();
    double change = 0.0;
    for (std::size_t a = 0; a < cur.size(); ++a) change = std::max(change, std::abs(cur[a] - prev[a]) / std::max(1.0, std::abs(cur[a])));
    prev = cur;
    if (change < cfg.tol) {
      fit.converged = true;
      break;
    }
  }

  fit.w_hat = e_step(counts, compute_exposures(rs, st).total, st.nu).w_hat;
  st.w = fit.w_hat;
  fit.nu = st.nu;
  fit.beta = st.beta;
  fit.increments = st.increments;
  fit.log_likelihood = marginal_log_likelihood(rs, st);
  fit.estimate = flatten_parameters(st.nu, st.beta);
  fit.se.assign(fit.estimate.size(), std::numeric_limits<double>::quiet_NaN());
  if (cfg.compute_se) fit.se = profile_standard_errors(rs, st);
  return fit;
}

/// Export: param,estimate,se,lower,upper (Wald 95%).
inline void write_em_csv(std::ostream& out, const EmFit& fit) {
  out << std::setprecision(17) << "param,estimate,se,lower,upper\n";
  for (std::size_t d = 0; d < fit.names.size(); ++d)
    out << fit.names[d] << ',' << fit.estimate[d] << ',' << fit.se[d] << ',' << fit.lower(d) << ',' << fit.upper(d) << '\n';
}

}  // namespace gaptide
