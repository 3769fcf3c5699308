// Monte Carlo evaluation of the risk-sensitive criterion, the benchmark-free
// growth objective, and the dynamic-game value, plus a grid-search oracle that
// locates the per-step saddle point without using the closed-form solution.
#ifndef RSKELLY_EVALUATOR_H
#define RSKELLY_EVALUATOR_H

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "rskelly/controls.hpp"
#include "rskelly/duality.hpp"
#include "rskelly/model.hpp"
#include "rskelly/riccati.hpp"
#include "rskelly/rng.hpp"
#include "rskelly/simulator.hpp"
#include "rskelly/types.hpp"

namespace rskelly {

struct McEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t n_paths = 0;
  bool log_space = false;  // true when mean/std_error live on a log scale
};

struct EvalOptions {
  std::size_t chunk_size = 512;
  int threads = 0;  // 0 -> read RSKELLY_THREADS, fallback 1
  std::uint64_t stream_offset = 0;
};

namespace detail {

inline int resolve_threads(int requested) {
  if (requested > 0) return std::min(requested, 64);
  if (const char* env = std::getenv("RSKELLY_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<int>(std::min<long>(v, 64));
  }
  return 1;
}

// Neumaier compensated accumulator: the reduction is exact enough that the
// chunked merge below is independent of the worker count.
struct Accumulator {
  double sum = 0.0;
  double comp = 0.0;
  void add(double x) {
    const double t = sum + x;
    if (std::abs(sum) >= std::abs(x))
      comp += (sum - t) + x;
    else
      comp += (x - t) + sum;
    sum = t;
  }
  double value() const { return sum + comp; }
};

// Partial statistics of exp(ell) over one chunk, kept in shifted space.
struct LogChunkStats {
  double max_ell = -std::numeric_limits<double>::infinity();
  double s1 = 0.0;  // sum exp(ell - max_ell)
  double s2 = 0.0;  // sum exp(2 (ell - max_ell))
  std::size_t count = 0;
};

inline LogChunkStats summarize_log_chunk(const std::vector<double>& ells) {
  LogChunkStats st;
  st.count = ells.size();
  for (double e : ells) st.max_ell = std::max(st.max_ell, e);
  Accumulator a1, a2;
  for (double e : ells) {
    const double z = std::exp(e - st.max_ell);
    a1.add(z);
    a2.add(z * z);
  }
  st.s1 = a1.value();
  st.s2 = a2.value();
  return st;
}

// Runs `body(chunk_index, begin, end)` over [0, n) in fixed-size chunks.
// Chunks are assigned round-robin so the set of chunk results is identical
// for any worker count; merging happens in chunk order afterwards.
template <class Body>
void for_each_chunk(std::size_t n, std::size_t chunk_size, int threads, Body&& body) {
  const std::size_t n_chunks = (n + chunk_size - 1) / chunk_size;
  if (threads <= 1 || n_chunks <= 1) {
    for (std::size_t c = 0; c < n_chunks; ++c)
      body(c, c * chunk_size, std::min(n, (c + 1) * chunk_size));
    return;
  }
  const int workers = static_cast<int>(std::min<std::size_t>(threads, n_chunks));
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&, t]() {
      for (std::size_t c = t; c < n_chunks; c += workers)
        body(c, c * chunk_size, std::min(n, (c + 1) * chunk_size));
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

// --- risk-sensitive criterion -------------------------------------------------

// Estimates I = E[exp(-theta (R^pi_T - R_0))] over independent factor paths.
// The per-path exponent is computed exactly; aggregation uses log-sum-exp so
// the log-scale estimate stays finite even when exp overflows.
//
// Returns both scales: .first is linear (mean = I-hat), .second is log scale
// (mean = ln I-hat, std_error by the delta method).
template <class Scalar>
std::pair<McEstimate, McEstimate> estimate_I_both(const MarketParams<Scalar>& params,
                                                  const StatePolicy<Scalar>& policy,
                                                  const ExplorationSchedule<Scalar>& sched,
                                                  const Vec<Scalar>& X0, std::size_t n_paths,
                                                  const RngSpec& spec,
                                                  const EvalOptions& opt = {}) {
  if (params.theta <= Scalar(0))
    throw SchemaError("estimate_I requires theta > 0 (theta = 0 is Kelly mode)");
  if (n_paths < 2) throw SchemaError("n_paths must be >= 2");
  const int threads = detail::resolve_threads(opt.threads);
  const std::size_t n_chunks = (n_paths + opt.chunk_size - 1) / opt.chunk_size;
  std::vector<detail::LogChunkStats> chunks(n_chunks);

  detail::for_each_chunk(n_paths, opt.chunk_size, threads,
                         [&](std::size_t c, std::size_t lo, std::size_t hi) {
                           std::vector<double> ells;
                           ells.reserve(hi - lo);
                           for (std::size_t i = lo; i < hi; ++i) {
                             RngSpec path_spec{spec.seed, spec.stream + opt.stream_offset + i};
                             const auto noise =
                                 draw_noise(path_spec, params.K, params.d, params.m, params.dt);
                             const auto X = simulate_factors(params, X0, noise);
                             const Scalar rbar =
                                 policy_averaged_log_excess(params, X, policy, sched, noise).total;
                             ells.push_back(static_cast<double>(-params.theta * rbar));
                           }
                           chunks[c] = detail::summarize_log_chunk(ells);
                         });

  double m_star = -std::numeric_limits<double>::infinity();
  for (const auto& st : chunks) m_star = std::max(m_star, st.max_ell);
  detail::Accumulator a1, a2;
  for (const auto& st : chunks) {
    if (st.count == 0) continue;
    const double f = std::exp(st.max_ell - m_star);
    a1.add(st.s1 * f);
    a2.add(st.s2 * f * f);
  }
  const double N = static_cast<double>(n_paths);
  const double s1 = a1.value();
  const double s2 = a2.value();
  const double mean_shift = s1 / N;
  const double var_shift = std::max(0.0, (s2 - s1 * s1 / N) / (N - 1.0));
  const double sd_shift = std::sqrt(var_shift);

  McEstimate log_est;
  log_est.mean = m_star + std::log(mean_shift);
  log_est.std_error = sd_shift / (mean_shift * std::sqrt(N));
  log_est.n_paths = n_paths;
  log_est.log_space = true;

  McEstimate lin_est;
  lin_est.mean = std::exp(m_star) * mean_shift;
  lin_est.std_error = std::exp(m_star) * sd_shift / std::sqrt(N);
  lin_est.n_paths = n_paths;
  lin_est.log_space = false;
  return {lin_est, log_est};
}

template <class Scalar>
McEstimate estimate_I(const MarketParams<Scalar>& params, const StatePolicy<Scalar>& policy,
                      const ExplorationSchedule<Scalar>& sched, const Vec<Scalar>& X0,
                      std::size_t n_paths, const RngSpec& spec, const EvalOptions& opt = {}) {
  return estimate_I_both(params, policy, sched, X0, n_paths, spec, opt).first;
}

// Estimates J = -(1/theta) ln I on the natural scale of J.
template <class Scalar>
McEstimate estimate_J(const MarketParams<Scalar>& params, const StatePolicy<Scalar>& policy,
                      const ExplorationSchedule<Scalar>& sched, const Vec<Scalar>& X0,
                      std::size_t n_paths, const RngSpec& spec, const EvalOptions& opt = {}) {
  const McEstimate log_i = estimate_I_both(params, policy, sched, X0, n_paths, spec, opt).second;
  McEstimate out;
  out.mean = -log_i.mean / static_cast<double>(params.theta);
  out.std_error = log_i.std_error / static_cast<double>(params.theta);
  out.n_paths = n_paths;
  out.log_space = false;
  return out;
}

// --- growth objective ---------------------------------------------------------

// Monte Carlo estimate of E[R_T - R_0] under a deterministic state policy
// (no exploration noise applied).
template <class Scalar>
McEstimate kelly_objective_mc(const MarketParams<Scalar>& params, const StatePolicy<Scalar>& policy,
                              const Vec<Scalar>& X0, std::size_t n_paths, const RngSpec& spec,
                              const EvalOptions& opt = {}) {
  if (n_paths < 2) throw SchemaError("n_paths must be >= 2");
  const int threads = detail::resolve_threads(opt.threads);
  const std::size_t n_chunks = (n_paths + opt.chunk_size - 1) / opt.chunk_size;
  struct ChunkMoments {
    double s1 = 0.0, s2 = 0.0;
  };
  std::vector<ChunkMoments> chunks(n_chunks);
  detail::for_each_chunk(n_paths, opt.chunk_size, threads,
                         [&](std::size_t c, std::size_t lo, std::size_t hi) {
                           detail::Accumulator a1, a2;
                           for (std::size_t i = lo; i < hi; ++i) {
                             RngSpec path_spec{spec.seed, spec.stream + opt.stream_offset + i};
                             const auto noise =
                                 draw_noise(path_spec, params.K, params.d, params.m, params.dt);
                             const auto X = simulate_factors(params, X0, noise);
                             double r = 0.0;
                             for (index_t k = 0; k < params.K; ++k) {
                               const auto& Xk = X[static_cast<std::size_t>(k)];
                               const auto terms = log_excess_step(
                                   params, Xk, policy(k, Xk),
                                   noise.w[static_cast<std::size_t>(k)]);
                               r += static_cast<double>(terms.total);
                             }
                             a1.add(r);
                             a2.add(r * r);
                           }
                           chunks[c].s1 = a1.value();
                           chunks[c].s2 = a2.value();
                         });
  detail::Accumulator a1, a2;
  for (const auto& cm : chunks) {
    a1.add(cm.s1);
    a2.add(cm.s2);
  }
  const double N = static_cast<double>(n_paths);
  const double mean = a1.value() / N;
  const double var = std::max(0.0, (a2.value() - N * mean * mean) / (N - 1.0));
  McEstimate out;
  out.mean = mean;
  out.std_error = std::sqrt(var / N);
  out.n_paths = n_paths;
  return out;
}

// Exact E[R_T - R_0] for a per-step affine policy h_k = D_k X + d_k.  The
// factor process is uncontrolled, so the expectation reduces to a closed-form
// sum over steps of the per-step reward evaluated at the factor moments.
template <class Scalar>
Scalar kelly_objective_exact(const MarketParams<Scalar>& params,
                             const std::vector<Mat<Scalar>>& D, const std::vector<Vec<Scalar>>& d,
                             const Vec<Scalar>& X0_mean, const Mat<Scalar>& X0_cov) {
  if (static_cast<index_t>(D.size()) != params.K || static_cast<index_t>(d.size()) != params.K)
    throw SchemaError("affine policy must have K entries");
  const auto dc = derive_constants(params);
  const Mat<Scalar>& G = dc.SigmaGram;
  Vec<Scalar> mu = X0_mean;
  Mat<Scalar> S = X0_cov;
  Scalar total = Scalar(0);
  const Scalar xi2 = params.Xi.squaredNorm();
  for (index_t k = 0; k < params.K; ++k) {
    const Mat<Scalar> Sbar = S + mu * mu.transpose();
    const Mat<Scalar>& Dk = D[static_cast<std::size_t>(k)];
    const Vec<Scalar>& dk = d[static_cast<std::size_t>(k)];
    // E[h' G h] for h = D X + d
    const Scalar hGh = (Dk.transpose() * G * Dk * Sbar).trace() +
                       Scalar(2) * dk.dot(G * (Dk * mu)) + dk.dot(G * dk);
    const Scalar ha = (Dk * mu + dk).dot(params.a);
    // E[h' A X] = tr(D' A Sbar) + d' A mu
    const Scalar hAX = (Dk.transpose() * params.A * Sbar).trace() + dk.dot(params.A * mu);
    const Scalar cx = params.c + params.Cvec.dot(mu);
    total += (-Scalar(0.5) * hGh + ha + Scalar(0.5) * xi2 - cx + hAX) * params.dt;
    // propagate factor moments
    mu = params.b * params.dt + dc.Btilde * mu;
    S = dc.Btilde * S * dc.Btilde.transpose() +
        params.Lambda * params.Lambda.transpose() * params.dt;
    S = Scalar(0.5) * (S + S.transpose());
  }
  return total;
}

// --- game value along tilted rollouts ------------------------------------------

// Estimates E^Q[ sum_k theta g(X_k, hbar_k, eta_k, gamma_k) dt ] where the
// factor paths are rolled out under the gamma-tilted dynamics.  The feedback
// maps take (k, X) and return the respective control mean.
template <class Scalar>
McEstimate estimate_game_value(const MarketParams<Scalar>& params,
                               const ExplorationSchedule<Scalar>& sched,
                               const std::function<Vec<Scalar>(index_t, const Vec<Scalar>&)>& hbar,
                               const std::function<Vec<Scalar>(index_t, const Vec<Scalar>&)>& gamma,
                               const std::function<Vec<Scalar>(index_t, const Vec<Scalar>&)>& eta,
                               const Vec<Scalar>& X0, std::size_t n_paths, const RngSpec& spec,
                               const EvalOptions& opt = {}) {
  if (params.theta <= Scalar(0))
    throw SchemaError("estimate_game_value requires theta > 0 (theta = 0 is Kelly mode)");
  if (n_paths < 2) throw SchemaError("n_paths must be >= 2");
  const int threads = detail::resolve_threads(opt.threads);
  const std::size_t n_chunks = (n_paths + opt.chunk_size - 1) / opt.chunk_size;
  struct ChunkMoments {
    double s1 = 0.0, s2 = 0.0;
  };
  std::vector<ChunkMoments> chunks(n_chunks);
  const auto dc = derive_constants(params);
  detail::for_each_chunk(
      n_paths, opt.chunk_size, threads, [&](std::size_t c, std::size_t lo, std::size_t hi) {
        detail::Accumulator a1, a2;
        for (std::size_t i = lo; i < hi; ++i) {
          RngSpec path_spec{spec.seed, spec.stream + opt.stream_offset + i};
          const auto noise = draw_noise(path_spec, params.K, params.d, params.m, params.dt);
          Vec<Scalar> X = X0;
          double total = 0.0;
          for (index_t k = 0; k < params.K; ++k) {
            const Vec<Scalar> hb = hbar(k, X);
            const Vec<Scalar> gm = gamma(k, X);
            const Vec<Scalar> et = eta(k, X);
            const Scalar g = running_reward_g(params, sched.at(k), X, hb, et, gm);
            total += static_cast<double>(params.theta * g * params.dt);
            const Vec<Scalar> shock = noise.w[static_cast<std::size_t>(k)] + gm * params.dt;
            X = params.b * params.dt + dc.Btilde * X + params.Lambda * shock;
          }
          a1.add(total);
          a2.add(total * total);
        }
        chunks[c].s1 = a1.value();
        chunks[c].s2 = a2.value();
      });
  detail::Accumulator a1, a2;
  for (const auto& cm : chunks) {
    a1.add(cm.s1);
    a2.add(cm.s2);
  }
  const double N = static_cast<double>(n_paths);
  const double mean = a1.value() / N;
  const double var = std::max(0.0, (a2.value() - N * mean * mean) / (N - 1.0));
  McEstimate out;
  out.mean = mean;
  out.std_error = std::sqrt(var / N);
  out.n_paths = n_paths;
  return out;
}

// --- grid-search saddle oracle --------------------------------------------------

struct OracleOptions {
  int points_per_dim = 21;  // odd, so boxes have a center point
  int stages = 2;
  double box_halfwidth_h = 3.0;
  double box_halfwidth_gamma = 4.0;
  double box_halfwidth_eta = 3.0;
  double shrink = 0.0;  // 0 -> auto: 3 cells / (points-1)
};

struct OracleReport {
  double value_minimax = 0.0;
  double value_maximin = 0.0;
  double value_analytic = 0.0;
  double gap = 0.0;                // |minimax - analytic|
  double minimax_maximin_gap = 0.0;
  std::vector<double> arg_h;
  std::vector<double> arg_gamma;
  std::vector<double> arg_eta;
  double dist_h = 0.0;      // distance from grid argmin to analytic h*
  double dist_gamma = 0.0;  // distance from grid argmax to analytic gamma*
  double dist_eta = 0.0;
  std::vector<double> final_cell_sizes;  // per dimension
  int stages_run = 0;
};

namespace detail {

// Exact quadratic surrogate of a function of N variables built from
// 1 + 2N + N(N-1)/2 probes.  Exact when the probed function is quadratic;
// the caller cross-checks the surrogate against direct evaluations.
template <class F>
struct QuadraticSurrogate {
  int N;
  double H0;
  std::vector<double> grad;
  std::vector<std::vector<double>> hess;

  explicit QuadraticSurrogate(int n, const F& f) : N(n), grad(n), hess(n, std::vector<double>(n)) {
    std::vector<double> u(static_cast<std::size_t>(n), 0.0);
    H0 = f(u);
    std::vector<double> fp(static_cast<std::size_t>(n)), fm(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      u[static_cast<std::size_t>(i)] = 1.0;
      fp[static_cast<std::size_t>(i)] = f(u);
      u[static_cast<std::size_t>(i)] = -1.0;
      fm[static_cast<std::size_t>(i)] = f(u);
      u[static_cast<std::size_t>(i)] = 0.0;
      grad[static_cast<std::size_t>(i)] =
          0.5 * (fp[static_cast<std::size_t>(i)] - fm[static_cast<std::size_t>(i)]);
      hess[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] =
          fp[static_cast<std::size_t>(i)] + fm[static_cast<std::size_t>(i)] - 2.0 * H0;
    }
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) {
        u[static_cast<std::size_t>(i)] = 1.0;
        u[static_cast<std::size_t>(j)] = 1.0;
        const double fij = f(u);
        u[static_cast<std::size_t>(i)] = 0.0;
        u[static_cast<std::size_t>(j)] = 0.0;
        const double hij = fij - fp[static_cast<std::size_t>(i)] - fp[static_cast<std::size_t>(j)] + H0;
        hess[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = hij;
        hess[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = hij;
      }
    }
  }

  double operator()(const std::vector<double>& u) const {
    double v = H0;
    for (int i = 0; i < N; ++i) {
      v += grad[static_cast<std::size_t>(i)] * u[static_cast<std::size_t>(i)];
      double row = 0.0;
      for (int j = 0; j < N; ++j)
        row += hess[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] *
               u[static_cast<std::size_t>(j)];
      v += 0.5 * u[static_cast<std::size_t>(i)] * row;
    }
    return v;
  }
};

}  // namespace detail

// Locates the per-step minimax and maximin of the stage objective
// H(hbar, gamma, eta) = theta g dt + E[u_{k+1}] on a refined grid, without
// consulting the closed-form control formulas.  The analytic saddle is used
// only to validate the box (it must lie strictly inside) and to report
// distances afterwards.
template <class Scalar>
OracleReport dpp_brute_force(const MarketParams<Scalar>& params, const QuadraticValue<Scalar>& qv,
                             const ExplorationSchedule<Scalar>& sched, index_t k,
                             const Vec<Scalar>& X, const OracleOptions& opt = {}) {
  if (k < 0 || k >= params.K) throw SchemaError("step index out of range");
  const int r = opt.points_per_dim;
  if (r < 3 || r % 2 == 0) throw SchemaError("points_per_dim must be odd and >= 3");
  const int m = static_cast<int>(params.m);
  const int d = static_cast<int>(params.d);
  const int N = m + d + m;

  StepContext<Scalar> ctx;
  ctx.k = k;
  ctx.X = X;
  ctx.P_next = qv.P[static_cast<std::size_t>(k + 1)];
  ctx.p_next = qv.p[static_cast<std::size_t>(k + 1)];
  ctx.r_next = qv.r[static_cast<std::size_t>(k + 1)];
  ctx.psi_k = sched.at(k);

  auto eval_raw = [&](const std::vector<double>& u) {
    Vec<Scalar> hb(m), gm(d), et(m);
    for (int i = 0; i < m; ++i) hb[i] = static_cast<Scalar>(u[static_cast<std::size_t>(i)]);
    for (int i = 0; i < d; ++i) gm[i] = static_cast<Scalar>(u[static_cast<std::size_t>(m + i)]);
    for (int i = 0; i < m; ++i) et[i] = static_cast<Scalar>(u[static_cast<std::size_t>(m + d + i)]);
    ControlTriple<Scalar> ct{hb, gm, et};
    return static_cast<double>(hamiltonian(params, ctx, ct));
  };
  const detail::QuadraticSurrogate<decltype(eval_raw)> H(N, eval_raw);
  // Self-check: the stage objective is quadratic, so the surrogate must
  // reproduce it exactly (up to roundoff) at off-probe points.
  {
    std::vector<double> u(static_cast<std::size_t>(N));
    for (int trial = 0; trial < 3; ++trial) {
      for (int i = 0; i < N; ++i)
        u[static_cast<std::size_t>(i)] =
            0.37 * static_cast<double>(trial + 1) * (i % 2 == 0 ? 1.0 : -0.6);
      const double direct = eval_raw(u);
      const double surrogate = H(u);
      const double scale = 1.0 + std::abs(direct);
      if (std::abs(direct - surrogate) > 1e-8 * scale)
        throw NumericalError("stage objective is not quadratic to tolerance");
    }
  }

  // Analytic saddle, used only for box validation and reported distances.
  const auto saddle = optimal_controls_primary(params, k, X, ctx.P_next, ctx.p_next);
  const double value_analytic = static_cast<double>(value_at(qv, k, X));

  std::vector<double> center(static_cast<std::size_t>(N), 0.0);
  std::vector<double> halfwidth(static_cast<std::size_t>(N));
  for (int i = 0; i < m; ++i) halfwidth[static_cast<std::size_t>(i)] = opt.box_halfwidth_h;
  for (int i = 0; i < d; ++i) halfwidth[static_cast<std::size_t>(m + i)] = opt.box_halfwidth_gamma;
  for (int i = 0; i < m; ++i) halfwidth[static_cast<std::size_t>(m + d + i)] = opt.box_halfwidth_eta;
  for (int i = 0; i < m; ++i) {
    if (std::abs(static_cast<double>(saddle.hstar[i])) >= opt.box_halfwidth_h)
      throw SchemaError("analytic saddle outside search box; enlarge grid");
    if (std::abs(static_cast<double>(saddle.etastar[i])) >= opt.box_halfwidth_eta)
      throw SchemaError("analytic saddle outside search box; enlarge grid");
  }
  for (int i = 0; i < d; ++i) {
    if (std::abs(static_cast<double>(saddle.gammastar[i])) >= opt.box_halfwidth_gamma)
      throw SchemaError("analytic saddle outside search box; enlarge grid");
  }

  const double shrink = opt.shrink > 0.0 ? opt.shrink : 3.0 / static_cast<double>(r - 1);
  std::size_t n_h = 1, n_y = 1;
  for (int i = 0; i < m; ++i) n_h *= static_cast<std::size_t>(r);
  for (int i = 0; i < d + m; ++i) n_y *= static_cast<std::size_t>(r);

  OracleReport report;
  std::vector<double> best_point(static_cast<std::size_t>(N), 0.0);

  for (int stage = 0; stage < opt.stages; ++stage) {
    // Axis grids for this stage.
    std::vector<std::vector<double>> axes(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
      axes[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(r));
      for (int j = 0; j < r; ++j) {
        const double frac = r == 1 ? 0.0 : (2.0 * j / (r - 1) - 1.0);
        axes[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
            center[static_cast<std::size_t>(i)] + frac * halfwidth[static_cast<std::size_t>(i)];
      }
    }
    auto decode = [&](std::size_t flat, int offset, int len, std::vector<double>& out) {
      for (int i = len - 1; i >= 0; --i) {
        out[static_cast<std::size_t>(offset + i)] =
            axes[static_cast<std::size_t>(offset + i)][flat % static_cast<std::size_t>(r)];
        flat /= static_cast<std::size_t>(r);
      }
    };

    std::vector<double> inner_min(n_y, std::numeric_limits<double>::infinity());
    double minimax = std::numeric_limits<double>::infinity();
    std::size_t minimax_h = 0, minimax_y = 0;
    std::vector<double> u(static_cast<std::size_t>(N));
    for (std::size_t ih = 0; ih < n_h; ++ih) {
      decode(ih, 0, m, u);
      double inner_max = -std::numeric_limits<double>::infinity();
      std::size_t inner_arg = 0;
      for (std::size_t iy = 0; iy < n_y; ++iy) {
        decode(iy, m, d + m, u);
        const double v = H(u);
        if (v > inner_max) {
          inner_max = v;
          inner_arg = iy;
        }
        if (v < inner_min[iy]) inner_min[iy] = v;
      }
      if (inner_max < minimax) {
        minimax = inner_max;
        minimax_h = ih;
        minimax_y = inner_arg;
      }
    }
    double maximin = -std::numeric_limits<double>::infinity();
    for (std::size_t iy = 0; iy < n_y; ++iy) maximin = std::max(maximin, inner_min[iy]);

    decode(minimax_h, 0, m, best_point);
    decode(minimax_y, m, d + m, best_point);
    report.value_minimax = minimax;
    report.value_maximin = maximin;
    report.stages_run = stage + 1;

    // Refine: recenter on the grid saddle found in this stage.
    center = best_point;
    for (int i = 0; i < N; ++i) halfwidth[static_cast<std::size_t>(i)] *= shrink;
    report.final_cell_sizes.assign(static_cast<std::size_t>(N), 0.0);
    for (int i = 0; i < N; ++i)
      report.final_cell_sizes[static_cast<std::size_t>(i)] =
          2.0 * halfwidth[static_cast<std::size_t>(i)] / shrink / static_cast<double>(r - 1);
  }

  report.value_analytic = value_analytic;
  report.gap = std::abs(report.value_minimax - value_analytic);
  report.minimax_maximin_gap = std::abs(report.value_minimax - report.value_maximin);
  report.arg_h.assign(best_point.begin(), best_point.begin() + m);
  report.arg_gamma.assign(best_point.begin() + m, best_point.begin() + m + d);
  report.arg_eta.assign(best_point.begin() + m + d, best_point.end());
  double dh = 0.0, dg = 0.0, de = 0.0;
  for (int i = 0; i < m; ++i) {
    dh += std::pow(report.arg_h[static_cast<std::size_t>(i)] -
                       static_cast<double>(saddle.hstar[i]),
                   2);
    de += std::pow(report.arg_eta[static_cast<std::size_t>(i)] -
                       static_cast<double>(saddle.etastar[i]),
                   2);
  }
  for (int i = 0; i < d; ++i)
    dg += std::pow(report.arg_gamma[static_cast<std::size_t>(i)] -
                       static_cast<double>(saddle.gammastar[i]),
                   2);
  report.dist_h = std::sqrt(dh);
  report.dist_gamma = std::sqrt(dg);
  report.dist_eta = std::sqrt(de);
  return report;
}

}  // namespace rskelly

#endif  // RSKELLY_EVALUATOR_H
