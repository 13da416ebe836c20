#pragma once

// Convergence diagnostics: split R-hat and rank-normalized bulk/tail ESS.

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gaptide/sampler.hpp"

namespace gaptide {

using ChainSet = std::vector<std::vector<double>>;

namespace detail {

inline void require_equal_lengths(const ChainSet& chains) {
  if (chains.empty()) throw std::invalid_argument("no chains supplied");
  for (const auto& c : chains)
    if (c.size() != chains.front().size()) throw std::invalid_argument("chains must have equal length");
}

/// Halves of every chain; the middle draw of an odd-length chain is dropped.
inline ChainSet split_chains(const ChainSet& chains) {
  ChainSet out;
  for (const auto& c : chains) {
    const std::size_t half = c.size() / 2;
    out.emplace_back(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(half));
    out.emplace_back(c.end() - static_cast<std::ptrdiff_t>(half), c.end());
  }
  return out;
}

inline double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

inline double sample_variance(const std::vector<double>& v) {
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return ss / static_cast<double>(v.size() - 1);
}

inline bool all_identical(const ChainSet& chains) {
  const double first = chains.front().front();
  for (const auto& c : chains)
    for (double x : c)
      if (x != first) return false;
  return true;
}

/// Biased autocovariance of one sequence at lag t.
inline double autocovariance(const std::vector<double>& x, double mean, std::size_t t) {
  double s = 0.0;
  for (std::size_t i = 0; i + t < x.size(); ++i) s += (x[i] - mean) * (x[i + t] - mean);
  return s / static_cast<double>(x.size());
}

/// Multi-chain ESS with Geyer's initial monotone positive sequence, on chains
/// that are already split/normalized as desired.
inline double ess_core(const ChainSet& chains) {
  const std::size_t m = chains.size();
  const std::size_t n = chains.front().size();
  const double total = static_cast<double>(m * n);
  if (n < 4) return total;
  if (all_identical(chains)) return total;

  std::vector<double> means(m);
  for (std::size_t c = 0; c < m; ++c) means[c] = mean_of(chains[c]);
  auto mean_acov = [&](std::size_t t) {
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c) s += autocovariance(chains[c], means[c], t);
    return s / static_cast<double>(m);
  };
  const double nn = static_cast<double>(n);
  const double mean_var = mean_acov(0) * nn / (nn - 1.0);
  double var_plus = mean_var * (nn - 1.0) / nn;
  if (m > 1) var_plus += sample_variance(means);
  if (!(var_plus > 0.0)) return total;

  auto rho = [&](std::size_t t) { return 1.0 - (mean_var - mean_acov(t)) / var_plus; };
  std::vector<double> rho_hat(n, 0.0);
  rho_hat[0] = 1.0;
  double rho_even = 1.0;
  double rho_odd = rho(1);
  rho_hat[1] = rho_odd;
  std::size_t t = 0;
  while (t + 5 < n && rho_even + rho_odd > 0.0) {
    t += 2;
    rho_even = rho(t);
    rho_odd = rho(t + 1);
    if (rho_even + rho_odd >= 0.0) {
      rho_hat[t] = rho_even;
      rho_hat[t + 1] = rho_odd;
    }
  }
  const std::size_t max_t = t;
  if (rho_even > 0.0) rho_hat[max_t] = rho_even;
  for (std::size_t s = 0; s + 4 <= max_t; s += 2) {
    const double prev = rho_hat[s] + rho_hat[s + 1];
    if (rho_hat[s + 2] + rho_hat[s + 3] > prev) rho_hat[s + 2] = rho_hat[s + 3] = prev / 2.0;
  }
  double tau = -1.0 + rho_hat[max_t];
  for (std::size_t s = 0; s < max_t; ++s) tau += 2.0 * rho_hat[s];
  tau = std::max(tau, 1.0 / std::log10(total));
  return total / tau;
}

/// Normal scores of pooled ranks (average ranks for ties), chain layout preserved.
inline ChainSet rank_normalize(const ChainSet& chains) {
  std::vector<std::pair<double, std::size_t>> pooled;
  for (const auto& c : chains)
    for (double x : c) pooled.emplace_back(x, pooled.size());
  const double s = static_cast<double>(pooled.size());
  std::sort(pooled.begin(), pooled.end());
  std::vector<double> z(pooled.size());
  const boost::math::normal_distribution<double> normal;
  for (std::size_t a = 0; a < pooled.size();) {
    std::size_t b = a;
    while (b < pooled.size() && pooled[b].first == pooled[a].first) ++b;
    const double rank = 0.5 * static_cast<double>(a + 1 + b);  // average of ranks a+1..b
    const double score = boost::math::quantile(normal, (rank - 0.375) / (s + 0.25));
    for (std::size_t c = a; c < b; ++c) z[pooled[c].second] = score;
    a = b;
  }
  ChainSet out;
  std::size_t pos = 0;
  for (const auto& c : chains) {
    out.emplace_back(z.begin() + static_cast<std::ptrdiff_t>(pos), z.begin() + static_cast<std::ptrdiff_t>(pos + c.size()));
    pos += c.size();
  }
  return out;
}

inline ChainSet maybe_split(const ChainSet& chains) { return chains.front().size() >= 4 ? split_chains(chains) : chains; }

}  // namespace detail

/// Split R-hat. Chains of length >= 4 are halved first. When the within-chain
/// variance is zero the result is 1 for identical constants and +inf otherwise.
inline double split_rhat(const ChainSet& chains) {
  detail::require_equal_lengths(chains);
  const ChainSet seqs = detail::maybe_split(chains);
  if (seqs.size() < 2 || seqs.front().size() < 2) throw std::invalid_argument("split R-hat needs at least two sequences of length two");
  const double n = static_cast<double>(seqs.front().size());
  std::vector<double> means, vars;
  for (const auto& s : seqs) {
    means.push_back(detail::mean_of(s));
    vars.push_back(detail::sample_variance(s));
  }
  const double w = detail::mean_of(vars);
  const double b = n * detail::sample_variance(means);
  if (!(w > 0.0)) return detail::all_identical(seqs) ? 1.0 : std::numeric_limits<double>::infinity();
  const double var_plus = (n - 1.0) / n * w + b / n;
  return std::sqrt(var_plus / w);
}

enum class EssMode { bulk, tail };

/// Effective sample size over all chains. Constant draws report the total count.
inline double ess(const ChainSet& chains, EssMode mode = EssMode::bulk) {
  detail::require_equal_lengths(chains);
  const double total = static_cast<double>(chains.size() * chains.front().size());
  if (total < 8) throw std::invalid_argument("ESS needs at least 8 draws");
  if (detail::all_identical(chains)) return total;
  if (mode == EssMode::bulk) return detail::ess_core(detail::maybe_split(detail::rank_normalize(chains)));

  std::vector<double> pooled;
  for (const auto& c : chains) pooled.insert(pooled.end(), c.begin(), c.end());
  std::sort(pooled.begin(), pooled.end());
  double best = std::numeric_limits<double>::infinity();
  for (double prob : {0.05, 0.95}) {
    const double q = quantile_sorted(pooled, prob);
    ChainSet ind;
    for (const auto& c : chains) {
      std::vector<double> v(c.size());
      for (std::size_t i = 0; i < c.size(); ++i) v[i] = c[i] <= q ? 1.0 : 0.0;
      ind.push_back(std::move(v));
    }
    best = std::min(best, detail::all_identical(ind) ? total : detail::ess_core(detail::maybe_split(ind)));
  }
  return best;
}

struct ParameterDiagnostics {
  std::string name;
  double rhat = 1.0;
  double ess_bulk = 0.0;
  double ess_tail = 0.0;
  double ess_fraction = 0.0;
};

struct DiagnosticsReport {
  std::vector<ParameterDiagnostics> rows;
  double rhat_max = 1.01;
  double ess_min_fraction = 0.10;

  bool all_ok() const {
    for (const auto& r : rows)
      if (!(r.rhat <= rhat_max) || !(r.ess_fraction >= ess_min_fraction)) return false;
    return true;
  }
};

inline ParameterDiagnostics diagnose_parameter(std::string name, const ChainSet& chains) {
  ParameterDiagnostics d;
  d.name = std::move(name);
  d.rhat = split_rhat(chains);
  d.ess_bulk = ess(chains, EssMode::bulk);
  d.ess_tail = ess(chains, EssMode::tail);
  d.ess_fraction = d.ess_bulk / static_cast<double>(chains.size() * chains.front().size());
  return d;
}

inline DiagnosticsReport diagnose(const PosteriorDraws& draws, double rhat_max = 1.01, double ess_min_fraction = 0.10) {
  DiagnosticsReport rep{{}, rhat_max, ess_min_fraction};
  for (std::size_t p = 0; p < draws.names().size(); ++p) rep.rows.push_back(diagnose_parameter(draws.names()[p], draws.parameter(p)));
  return rep;
}

/// Report: param,rhat,ess,ess_pct,ess_tail,rhat_ok,ess_ok (ess_pct in percent).
inline void write_diagnostics_csv(std::ostream& out, const DiagnosticsReport& rep) {
  out << std::setprecision(10) << "param,rhat,ess,ess_pct,ess_tail,rhat_ok,ess_ok\n";
  for (const auto& r : rep.rows)
    out << r.name << ',' << r.rhat << ',' << r.ess_bulk << ',' << 100.0 * r.ess_fraction << ',' << r.ess_tail << ','
        << (r.rhat <= rep.rhat_max ? 1 : 0) << ',' << (r.ess_fraction >= rep.ess_min_fraction ? 1 : 0) << '\n';
}

}  // namespace gaptide
