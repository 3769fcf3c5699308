#ifndef RSKELLY_TEST_INSTANCES_H
#define RSKELLY_TEST_INSTANCES_H

// Deterministic pseudo-random market instances shared by the unit tests and
// the acceptance binary.  All draws come from a local splitmix64 walk so a
// given seed always produces the same instance on every platform.

#include <cstdint>
#include <stdexcept>

#include "rskelly/model.hpp"
#include "rskelly/riccati.hpp"

namespace testgen {

using rskelly::index_t;

inline std::uint64_t next_u64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// uniform in [0, 1)
inline double unit(std::uint64_t& state) {
  return static_cast<double>(next_u64(state) >> 11) * 0x1.0p-53;
}

// uniform in [-1, 1)
inline double sym(std::uint64_t& state) { return 2.0 * unit(state) - 1.0; }

// A well-conditioned random market: diagonally dominant Sigma, mildly
// mean-reverting factors, small cross terms.  d = n + m + 1 throughout.
inline rskelly::MarketParams<double> random_params(std::uint64_t seed,
                                                   index_t m, index_t n,
                                                   index_t K, double theta,
                                                   double dt) {
  std::uint64_t s = seed * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL;
  rskelly::MarketParams<double> mp;
  mp.m = m;
  mp.n = n;
  mp.d = n + m + 1;
  mp.K = K;
  mp.theta = theta;
  mp.dt = dt;

  mp.a = rskelly::Vec<double>(m);
  for (index_t i = 0; i < m; ++i) mp.a(i) = 0.05 + 0.10 * unit(s);
  mp.A = rskelly::Mat<double>(m, n);
  for (index_t i = 0; i < m; ++i)
    for (index_t j = 0; j < n; ++j) mp.A(i, j) = 0.30 * sym(s);
  mp.Sigma = rskelly::Mat<double>(m, mp.d);
  for (index_t i = 0; i < m; ++i)
    for (index_t j = 0; j < mp.d; ++j) mp.Sigma(i, j) = 0.12 * sym(s);
  for (index_t i = 0; i < m; ++i) mp.Sigma(i, i) += 0.55 + 0.25 * unit(s);

  mp.b = rskelly::Vec<double>(n);
  for (index_t i = 0; i < n; ++i) mp.b(i) = 0.05 * sym(s);
  mp.Bmat = rskelly::Mat<double>(n, n);
  for (index_t i = 0; i < n; ++i)
    for (index_t j = 0; j < n; ++j) mp.Bmat(i, j) = 0.15 * sym(s);
  for (index_t i = 0; i < n; ++i) mp.Bmat(i, i) -= 0.30;
  mp.Lambda = rskelly::Mat<double>(n, mp.d);
  for (index_t i = 0; i < n; ++i)
    for (index_t j = 0; j < mp.d; ++j) mp.Lambda(i, j) = 0.20 * sym(s);

  mp.c = 0.02 * sym(s);
  mp.Cvec = rskelly::Vec<double>(n);
  for (index_t i = 0; i < n; ++i) mp.Cvec(i) = 0.10 * sym(s);
  mp.Xi = rskelly::Vec<double>(mp.d);
  for (index_t i = 0; i < mp.d; ++i) mp.Xi(i) = 0.15 * sym(s);
  return mp;
}

// Random state with entries in [-radius, radius).
inline rskelly::Vec<double> random_state(std::uint64_t seed, index_t n,
                                         double radius) {
  std::uint64_t s = seed * 0xd1342543de82ef95ULL + 0xaf251af3b0f025b5ULL;
  rskelly::Vec<double> x(n);
  for (index_t i = 0; i < n; ++i) x(i) = radius * sym(s);
  return x;
}

// Exploration covariance at half the curvature bound: Psi = 0.5 (theta G dt)^-1.
inline rskelly::Mat<double> psi_half_curvature(const rskelly::MarketParams<double>& mp) {
  if (!(mp.theta > 0.0))
    throw std::invalid_argument("psi_half_curvature requires theta > 0");
  const rskelly::Mat<double> G = mp.Sigma * mp.Sigma.transpose();
  rskelly::Mat<double> psi =
      (0.5 / (mp.theta * mp.dt)) * G.inverse();
  return 0.5 * (psi + psi.transpose());
}

inline rskelly::ExplorationSchedule<double> sched_half_curvature(
    const rskelly::MarketParams<double>& mp) {
  return rskelly::ExplorationSchedule<double>::constant(psi_half_curvature(mp), mp.K);
}

// Exploration schedule safely inside the stronger (tilt-aware) bound at every
// step.  The quadratic and linear value coefficients do not depend on the
// exploration covariance, so a solve with a tiny placeholder schedule yields
// the exact per-step curvature matrices from which the bound is computed.
inline rskelly::ExplorationSchedule<double> sched_rr_safe(
    const rskelly::MarketParams<double>& mp, double frac = 0.5) {
  const rskelly::Mat<double> tiny = 1e-4 * psi_half_curvature(mp);
  auto probe = rskelly::ExplorationSchedule<double>::constant(tiny, mp.K);
  auto sr = rskelly::solve(mp, probe);
  rskelly::ExplorationSchedule<double> out;
  out.psi.resize(static_cast<std::size_t>(mp.K));
  const rskelly::Mat<double> eye =
      rskelly::Mat<double>::Identity(mp.d, mp.d);
  for (index_t k = 0; k < mp.K; ++k) {
    const auto h = rskelly::helper_matrices(
        mp, sr.value.P[static_cast<std::size_t>(k + 1)]);
    const rskelly::Mat<double> inner =
        eye - mp.theta * h.calA.fullPivLu().solve(eye);
    rskelly::Mat<double> bound =
        mp.theta * mp.dt * (mp.Sigma * inner * mp.Sigma.transpose());
    bound = 0.5 * (bound + bound.transpose());
    rskelly::Mat<double> psi = frac * bound.inverse();
    out.psi[static_cast<std::size_t>(k)] = 0.5 * (psi + psi.transpose());
  }
  return out;
}

}  // namespace testgen

#endif
