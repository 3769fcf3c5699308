// Path simulation: factor dynamics (nominal and drift-tilted), exact
// lognormal asset prices, log excess growth over the benchmark in raw and
// policy-averaged form, and first/second moment propagation.
//
// All randomness flows through counter-based draws keyed by (seed, stream,
// step, channel, index), so paths are reproducible bit-for-bit and
// independent across streams by construction.
#ifndef RSKELLY_SIMULATOR_H
#define RSKELLY_SIMULATOR_H

#include <functional>
#include <vector>

#include "rskelly/model.hpp"
#include "rskelly/rng.hpp"
#include "rskelly/types.hpp"

namespace rskelly {

// Raw Gaussian material for one path: w_k ~ N(0, dt*I_d) drives the factors
// and assets; v_std_k ~ N(0, I_m) is uncolored exploration noise (scaled by
// a Cholesky factor of Psi_k at the point of use).
template <class Scalar>
struct NoiseDraws {
  std::vector<Vec<Scalar>> w;      // K vectors, length d
  std::vector<Vec<Scalar>> v_std;  // K vectors, length m
};

template <class Scalar>
NoiseDraws<Scalar> draw_noise(const RngSpec& spec, index_t K, index_t d,
                              index_t m, Scalar dt) {
  NoiseDraws<Scalar> nd;
  nd.w.reserve(static_cast<std::size_t>(K));
  nd.v_std.reserve(static_cast<std::size_t>(K));
  const Scalar sdt = std::sqrt(dt);
  for (index_t k = 0; k < K; ++k) {
    Vec<Scalar> wk(d);
    for (index_t i = 0; i < d; ++i)
      wk(i) = sdt * Scalar(standard_normal(spec, std::uint64_t(k),
                                           NoiseChannel::factor,
                                           std::uint64_t(i)));
    Vec<Scalar> vk(m);
    for (index_t i = 0; i < m; ++i)
      vk(i) = Scalar(standard_normal(spec, std::uint64_t(k),
                                     NoiseChannel::exploration,
                                     std::uint64_t(i)));
    nd.w.push_back(std::move(wk));
    nd.v_std.push_back(std::move(vk));
  }
  return nd;
}

// Drift tilt: gamma(k, X_k) shifts the mean of w_k by gamma*dt. A null
// callback means no tilt; the zero tilt reproduces the untilted path
// bit-for-bit because adding an exact zero leaves every product unchanged.
template <class Scalar>
using DriftTilt = std::function<Vec<Scalar>(index_t, const Vec<Scalar>&)>;

namespace detail {

template <class Scalar>
std::vector<Vec<Scalar>> roll_factors(const MarketParams<Scalar>& mp,
                                      const Vec<Scalar>& X0,
                                      const NoiseDraws<Scalar>& noise,
                                      const DriftTilt<Scalar>& gamma) {
  if (X0.size() != mp.n) throw SchemaError("X0 must have length n");
  if (noise.w.size() != static_cast<std::size_t>(mp.K))
    throw SchemaError("noise must carry K factor draws");
  const Mat<Scalar> Btilde = Mat<Scalar>::Identity(mp.n, mp.n) + mp.Bmat * mp.dt;
  std::vector<Vec<Scalar>> X;
  X.reserve(static_cast<std::size_t>(mp.K) + 1);
  X.push_back(X0);
  for (index_t k = 0; k < mp.K; ++k) {
    Vec<Scalar> shock = noise.w[static_cast<std::size_t>(k)];
    if (gamma) shock += gamma(k, X.back()) * mp.dt;
    X.push_back(mp.b * mp.dt + Btilde * X.back() + mp.Lambda * shock);
  }
  return X;
}

}  // namespace detail

// Factor path under the nominal shock distribution; returns K+1 states.
template <class Scalar>
std::vector<Vec<Scalar>> simulate_factors(const MarketParams<Scalar>& mp,
                                          const Vec<Scalar>& X0,
                                          const NoiseDraws<Scalar>& noise) {
  return detail::roll_factors<Scalar>(mp, X0, noise, nullptr);
}

// Factor path with the shock mean shifted by gamma(k, X_k)*dt per step.
template <class Scalar>
std::vector<Vec<Scalar>> simulate_factors_tilted(
    const MarketParams<Scalar>& mp, const Vec<Scalar>& X0,
    const NoiseDraws<Scalar>& noise, const DriftTilt<Scalar>& gamma) {
  return detail::roll_factors<Scalar>(mp, X0, noise, gamma);
}

// ========================= log excess growth ==============================

// Per-step decomposition of the log excess growth of the portfolio over the
// benchmark: drift part (deterministic given X_k and the allocation) and
// shock part (linear in w_k).
template <class Scalar>
struct LogExcessTerms {
  std::vector<Scalar> drift;  // K entries
  std::vector<Scalar> shock;  // K entries
  Scalar total = Scalar(0);
};

// Single-step log excess growth at state X with allocation h and factor
// shock w (already scaled so that w ~ N(mean, dt*I) under the simulated
// measure).
template <class Scalar>
struct StepExcess {
  Scalar drift = Scalar(0);
  Scalar shock = Scalar(0);
  Scalar total = Scalar(0);
};

template <class Scalar>
StepExcess<Scalar> log_excess_step(const MarketParams<Scalar>& mp,
                                   const Vec<Scalar>& Xk, const Vec<Scalar>& h,
                                   const Vec<Scalar>& w) {
  const Mat<Scalar> gram = mp.Sigma * mp.Sigma.transpose();
  StepExcess<Scalar> out;
  out.drift = (-Scalar(0.5) * h.dot(gram * h) + h.dot(mp.a) +
               Scalar(0.5) * mp.Xi.squaredNorm() - mp.c +
               (mp.A.transpose() * h - mp.Cvec).dot(Xk)) *
              mp.dt;
  out.shock = (mp.Sigma.transpose() * h - mp.Xi).dot(w);
  out.total = out.drift + out.shock;
  return out;
}

namespace detail {

// Shared accumulation for the raw and policy-averaged forms; `extra_drift`
// carries the exploration variance correction (0 for the raw form).
template <class Scalar, class HAt>
LogExcessTerms<Scalar> accumulate_log_excess(const MarketParams<Scalar>& mp,
                                             const std::vector<Vec<Scalar>>& X,
                                             HAt&& h_at,
                                             const NoiseDraws<Scalar>& noise,
                                             const std::vector<Scalar>& extra_drift) {
  if (X.size() != static_cast<std::size_t>(mp.K) + 1)
    throw SchemaError("state path must have K+1 entries");
  const Mat<Scalar> gram = mp.Sigma * mp.Sigma.transpose();
  LogExcessTerms<Scalar> out;
  out.drift.reserve(static_cast<std::size_t>(mp.K));
  out.shock.reserve(static_cast<std::size_t>(mp.K));
  for (index_t k = 0; k < mp.K; ++k) {
    const Vec<Scalar>& Xk = X[static_cast<std::size_t>(k)];
    const Vec<Scalar> h = h_at(k, Xk);
    Scalar q = (-Scalar(0.5) * h.dot(gram * h) + h.dot(mp.a) +
                Scalar(0.5) * mp.Xi.squaredNorm() - mp.c +
                (mp.A.transpose() * h - mp.Cvec).dot(Xk)) *
               mp.dt;
    if (!extra_drift.empty()) q += extra_drift[static_cast<std::size_t>(k)];
    const Scalar s =
        (mp.Sigma.transpose() * h - mp.Xi).dot(noise.w[static_cast<std::size_t>(k)]);
    out.drift.push_back(q);
    out.shock.push_back(s);
    out.total += q + s;
  }
  return out;
}

}  // namespace detail

// Raw log excess growth R_T - R_0 for the applied allocations h_k (one
// m-vector per step, e.g. policy mean plus sampled exploration).
template <class Scalar>
LogExcessTerms<Scalar> log_excess_return(const MarketParams<Scalar>& mp,
                                         const std::vector<Vec<Scalar>>& X,
                                         const std::vector<Vec<Scalar>>& h_applied,
                                         const NoiseDraws<Scalar>& noise) {
  if (h_applied.size() != static_cast<std::size_t>(mp.K))
    throw SchemaError("h_applied must have K entries");
  return detail::accumulate_log_excess<Scalar>(
      mp, X, [&](index_t k, const Vec<Scalar>&) {
        return h_applied[static_cast<std::size_t>(k)];
      },
      noise, {});
}

// Log excess growth with the exploration noise integrated out: the policy
// mean hbar replaces the sampled allocation and each step picks up the
// variance correction -0.5 * tr(Psi_k Sigma Sigma') * dt.
template <class Scalar>
LogExcessTerms<Scalar> policy_averaged_log_excess(
    const MarketParams<Scalar>& mp, const std::vector<Vec<Scalar>>& X,
    const StatePolicy<Scalar>& policy, const ExplorationSchedule<Scalar>& sched,
    const NoiseDraws<Scalar>& noise) {
  if (sched.psi.size() != static_cast<std::size_t>(mp.K))
    throw SchemaError("exploration schedule must have K entries");
  const Mat<Scalar> gram = mp.Sigma * mp.Sigma.transpose();
  std::vector<Scalar> correction;
  correction.reserve(static_cast<std::size_t>(mp.K));
  for (index_t k = 0; k < mp.K; ++k)
    correction.push_back(-Scalar(0.5) * (sched.at(k) * gram).trace() * mp.dt);
  return detail::accumulate_log_excess<Scalar>(
      mp, X, [&](index_t k, const Vec<Scalar>& Xk) { return policy(k, Xk); },
      noise, correction);
}

// ============================ asset prices ================================

// Exact lognormal interval updates for the m asset prices; returns an
// m x (K+1) matrix of price levels.
template <class Scalar>
Mat<Scalar> simulate_asset_prices(const MarketParams<Scalar>& mp,
                                  const std::vector<Vec<Scalar>>& X,
                                  const NoiseDraws<Scalar>& noise,
                                  const Vec<Scalar>& S0) {
  if (S0.size() != mp.m) throw SchemaError("S0 must have length m");
  if ((S0.array() <= Scalar(0)).any())
    throw SchemaError("S0 must be strictly positive");
  if (X.size() != static_cast<std::size_t>(mp.K) + 1)
    throw SchemaError("state path must have K+1 entries");
  const Vec<Scalar> half_var =
      Scalar(0.5) * (mp.Sigma * mp.Sigma.transpose()).diagonal();
  Mat<Scalar> S(mp.m, mp.K + 1);
  S.col(0) = S0;
  for (index_t k = 0; k < mp.K; ++k) {
    const Vec<Scalar> growth =
        (mp.a + mp.A * X[static_cast<std::size_t>(k)] - half_var) * mp.dt +
        mp.Sigma * noise.w[static_cast<std::size_t>(k)];
    S.col(k + 1) = S.col(k).array() * growth.array().exp();
  }
  return S;
}

// ============================== PathRecord ================================

// One fully simulated episode: states, applied allocations, and the log
// excess growth in raw and policy-averaged form.
template <class Scalar>
struct PathRecord {
  std::vector<Vec<Scalar>> X;          // K+1 states
  std::vector<Vec<Scalar>> h_applied;  // K allocations (mean + exploration)
  Scalar logexcess = Scalar(0);             // raw, at h_applied
  Scalar logexcess_policy_avg = Scalar(0);  // exploration integrated out
  LogExcessTerms<Scalar> raw_terms;
  LogExcessTerms<Scalar> avg_terms;
};

// Roll one episode: factors (optionally drift-tilted), exploration sampling
// h_k = hbar_k + v_k with v_k = eta(k,X_k) + chol(Psi_k) * v_std_k, and both
// log-excess accumulations. Null tilts mean gamma = 0 / eta = 0.
template <class Scalar>
PathRecord<Scalar> simulate_path(const MarketParams<Scalar>& mp,
                                 const Vec<Scalar>& X0,
                                 const StatePolicy<Scalar>& policy,
                                 const ExplorationSchedule<Scalar>& sched,
                                 const RngSpec& spec,
                                 const DriftTilt<Scalar>& gamma = nullptr,
                                 const DriftTilt<Scalar>& eta = nullptr) {
  if (sched.psi.size() != static_cast<std::size_t>(mp.K))
    throw SchemaError("exploration schedule must have K entries");
  PathRecord<Scalar> rec;
  NoiseDraws<Scalar> noise = draw_noise<Scalar>(spec, mp.K, mp.d, mp.m, mp.dt);
  if (gamma) {
    // Fold the drift tilt into the realized shocks once, so the state path
    // and the return terms below see the same effective increments.
    const Mat<Scalar> Btilde =
        Mat<Scalar>::Identity(mp.n, mp.n) + mp.Bmat * mp.dt;
    rec.X.reserve(static_cast<std::size_t>(mp.K) + 1);
    rec.X.push_back(X0);
    for (index_t k = 0; k < mp.K; ++k) {
      Vec<Scalar>& wk = noise.w[static_cast<std::size_t>(k)];
      wk += gamma(k, rec.X.back()) * mp.dt;
      rec.X.push_back(mp.b * mp.dt + Btilde * rec.X.back() + mp.Lambda * wk);
    }
  } else {
    rec.X = detail::roll_factors<Scalar>(mp, X0, noise, nullptr);
  }
  rec.h_applied.reserve(static_cast<std::size_t>(mp.K));
  for (index_t k = 0; k < mp.K; ++k) {
    const Vec<Scalar>& Xk = rec.X[static_cast<std::size_t>(k)];
    Eigen::LLT<Mat<Scalar>> llt(sched.at(k));
    if (llt.info() != Eigen::Success)
      throw NumericalError("Psi_k Cholesky failed in simulate_path");
    Vec<Scalar> v = llt.matrixL() * noise.v_std[static_cast<std::size_t>(k)];
    if (eta) v += eta(k, Xk);
    rec.h_applied.push_back(policy(k, Xk) + v);
  }
  rec.raw_terms = log_excess_return<Scalar>(mp, rec.X, rec.h_applied, noise);
  rec.avg_terms =
      policy_averaged_log_excess<Scalar>(mp, rec.X, policy, sched, noise);
  rec.logexcess = rec.raw_terms.total;
  rec.logexcess_policy_avg = rec.avg_terms.total;
  return rec;
}

// ========================= moment propagation =============================

// First and second moments of the nominal factor chain:
//   mean_{k+1} = b*dt + Btilde*mean_k
//   cov_{k+1}  = Btilde*cov_k*Btilde' + Lambda*Lambda'*dt
template <class Scalar>
struct FactorMoments {
  std::vector<Vec<Scalar>> mean;  // K+1
  std::vector<Mat<Scalar>> cov;   // K+1
};

template <class Scalar>
FactorMoments<Scalar> factor_moments(const MarketParams<Scalar>& mp,
                                     const Vec<Scalar>& mean0,
                                     const Mat<Scalar>& cov0) {
  if (mean0.size() != mp.n || cov0.rows() != mp.n || cov0.cols() != mp.n)
    throw SchemaError("moment seeds must be n-dimensional");
  const Mat<Scalar> Btilde = Mat<Scalar>::Identity(mp.n, mp.n) + mp.Bmat * mp.dt;
  const Mat<Scalar> lam_gram = mp.Lambda * mp.Lambda.transpose() * mp.dt;
  FactorMoments<Scalar> fm;
  fm.mean.reserve(static_cast<std::size_t>(mp.K) + 1);
  fm.cov.reserve(static_cast<std::size_t>(mp.K) + 1);
  fm.mean.push_back(mean0);
  fm.cov.push_back(cov0);
  for (index_t k = 0; k < mp.K; ++k) {
    fm.mean.push_back(mp.b * mp.dt + Btilde * fm.mean.back());
    fm.cov.push_back(Btilde * fm.cov.back() * Btilde.transpose() + lam_gram);
  }
  return fm;
}

}  // namespace rskelly

#endif  // RSKELLY_SIMULATOR_H
