// Policy-gradient and actor-critic learners for the tilted allocation game
// and the Kelly problem: per-step affine policies, batched rollouts with
// counter-based randomness, score-function / finite-difference / exact
// gradient estimators, natural-gradient updates preconditioned by the state
// second moment, a least-squares quadratic critic, and training drivers with
// traces, convergence tests, and divergence aborts.
#ifndef RSKELLY_RL_H
#define RSKELLY_RL_H

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "rskelly/controls.hpp"
#include "rskelly/duality.hpp"
#include "rskelly/evaluator.hpp"
#include "rskelly/model.hpp"
#include "rskelly/riccati.hpp"
#include "rskelly/rng.hpp"
#include "rskelly/simulator.hpp"
#include "rskelly/types.hpp"

namespace rskelly {

// ============================ configuration ================================

enum class GradientEstimator { score_function, finite_difference, exact };
enum class StepSchedule { constant, inverse, inverse_sqrt };

struct TrainConfig {
  std::size_t episodes = 10000;  // total rollouts across all updates
  std::size_t batch = 128;       // rollouts per update
  double step0 = 0.1;            // base step size
  StepSchedule schedule = StepSchedule::inverse_sqrt;
  GradientEstimator estimator = GradientEstimator::score_function;
  double precond_ridge = 1e-6;  // relative ridge on the state second moment
  double critic_ridge = 1e-8;   // relative ridge in the critic regression
  std::uint64_t seed = 0;
  double tolerance = 0.0;  // gradient-norm early stop; 0 disables
  int patience = 5;        // consecutive small-gradient updates required
  double x0_spread = 0.0;  // stddev of initial-state jitter (identifiability)
  bool freeze_eta = false;       // keep the exploration-mean tilt at zero
  bool alternating = false;      // alternate descent/ascent updates
  double divergence_threshold = 1e8;
  double fd_step = 1e-4;  // finite-difference probe size
};

inline double schedule_step(const TrainConfig& cfg, std::size_t iteration) {
  const double ell = static_cast<double>(std::max<std::size_t>(1, iteration));
  switch (cfg.schedule) {
    case StepSchedule::constant:
      return cfg.step0;
    case StepSchedule::inverse:
      return cfg.step0 / ell;
    case StepSchedule::inverse_sqrt:
    default:
      return cfg.step0 / std::sqrt(ell);
  }
}

// =============================== policies ==================================

// Per-step affine policy for all three game players:
//   hbar_k(X) = D_k X + d_k   (allocation mean, minimizing player)
//   gamma_k(X) = E_k X + e_k  (shock-drift tilt, maximizing player)
//   eta_k(X)  = F_k X + f_k   (exploration-mean tilt, maximizing player)
template <class Scalar>
struct AffineGamePolicy {
  std::vector<Mat<Scalar>> D;     // K entries, m x n
  std::vector<Vec<Scalar>> dvec;  // K entries, m
  std::vector<Mat<Scalar>> E;     // K entries, d x n
  std::vector<Vec<Scalar>> evec;  // K entries, d
  std::vector<Mat<Scalar>> F;     // K entries, m x n
  std::vector<Vec<Scalar>> fvec;  // K entries, m

  static AffineGamePolicy zero(const MarketParams<Scalar>& mp) {
    AffineGamePolicy pol;
    const std::size_t KZ = static_cast<std::size_t>(mp.K);
    pol.D.assign(KZ, Mat<Scalar>::Zero(mp.m, mp.n));
    pol.dvec.assign(KZ, Vec<Scalar>::Zero(mp.m));
    pol.E.assign(KZ, Mat<Scalar>::Zero(mp.d, mp.n));
    pol.evec.assign(KZ, Vec<Scalar>::Zero(mp.d));
    pol.F.assign(KZ, Mat<Scalar>::Zero(mp.m, mp.n));
    pol.fvec.assign(KZ, Vec<Scalar>::Zero(mp.m));
    return pol;
  }

  index_t horizon() const { return static_cast<index_t>(D.size()); }

  Vec<Scalar> hbar_at(index_t k, const Vec<Scalar>& X) const {
    const std::size_t kz = static_cast<std::size_t>(k);
    return D[kz] * X + dvec[kz];
  }
  Vec<Scalar> gamma_at(index_t k, const Vec<Scalar>& X) const {
    const std::size_t kz = static_cast<std::size_t>(k);
    return E[kz] * X + evec[kz];
  }
  Vec<Scalar> eta_at(index_t k, const Vec<Scalar>& X) const {
    const std::size_t kz = static_cast<std::size_t>(k);
    return F[kz] * X + fvec[kz];
  }
};

// Affine coefficients of the analytic saddle: (D, d) read off the primary
// control formula at basis states, (E, e) from the tilt feedback
// coefficients, (F, f) identically zero.
template <class Scalar>
AffineGamePolicy<Scalar> analytic_game_policy(const MarketParams<Scalar>& mp,
                                              const QuadraticValue<Scalar>& qv) {
  if (qv.K() != mp.K) throw SchemaError("value coefficients must cover K steps");
  AffineGamePolicy<Scalar> pol = AffineGamePolicy<Scalar>::zero(mp);
  for (index_t k = 0; k < mp.K; ++k) {
    const std::size_t kz = static_cast<std::size_t>(k);
    const Mat<Scalar>& Pn = qv.P[kz + 1];
    const Vec<Scalar>& pn = qv.p[kz + 1];
    const Vec<Scalar> h0 =
        optimal_controls_primary<Scalar>(mp, k, Vec<Scalar>::Zero(mp.n), Pn, pn)
            .hstar;
    pol.dvec[kz] = h0;
    for (index_t j = 0; j < mp.n; ++j) {
      Vec<Scalar> ej = Vec<Scalar>::Zero(mp.n);
      ej(j) = Scalar(1);
      pol.D[kz].col(j) =
          optimal_controls_primary<Scalar>(mp, k, ej, Pn, pn).hstar - h0;
    }
    const GammaFeedback<Scalar> gf = gamma_feedback<Scalar>(mp, Pn, pn);
    pol.E[kz] = gf.Kfrak;
    pol.evec[kz] = gf.kfrak;
  }
  return pol;
}

// ================================ rollouts =================================

// One recorded step of a tilted, exploring episode. `score_v` is the
// exploration-density score inv(Psi)(v - eta); `wtil` is the drawn factor
// noise (so the effective shock was wtil + gamma*dt); `zeta` is the
// observable per-step objective contribution -theta*dR - penalty.
template <class Scalar>
struct StepSample {
  Vec<Scalar> X;        // n, state at this step
  Vec<Scalar> score_v;  // m
  Vec<Scalar> wtil;     // d
  Vec<Scalar> gamma;    // d, tilt mean applied
  Vec<Scalar> eta;      // m, exploration-mean tilt applied
  Scalar zeta = Scalar(0);
};

template <class Scalar>
struct PathSample {
  std::vector<StepSample<Scalar>> steps;  // K entries
  Vec<Scalar> X_terminal;
  Scalar total = Scalar(0);  // sum of zeta over steps
};

template <class Scalar>
struct RolloutBatch {
  std::vector<PathSample<Scalar>> paths;
};

namespace detail {

template <class Scalar>
struct PsiFactors {
  std::vector<Mat<Scalar>> chol;     // lower Cholesky factor of Psi_k
  std::vector<Mat<Scalar>> psi_inv;  // inv(Psi_k)
};

template <class Scalar>
PsiFactors<Scalar> psi_factors(const MarketParams<Scalar>& mp,
                               const ExplorationSchedule<Scalar>& sched) {
  if (sched.psi.size() != static_cast<std::size_t>(mp.K))
    throw SchemaError("exploration schedule must have K entries");
  PsiFactors<Scalar> pf;
  pf.chol.reserve(sched.psi.size());
  pf.psi_inv.reserve(sched.psi.size());
  for (index_t k = 0; k < mp.K; ++k) {
    Eigen::LLT<Mat<Scalar>> llt(sched.at(k));
    if (llt.info() != Eigen::Success)
      throw SchemaError("exploration covariance not SPD");
    pf.chol.push_back(Mat<Scalar>(llt.matrixL()));
    pf.psi_inv.push_back(
        llt.solve(Mat<Scalar>::Identity(mp.m, mp.m)));
  }
  return pf;
}

template <class Scalar>
Vec<Scalar> jittered_x0(const MarketParams<Scalar>& mp, const Vec<Scalar>& X0,
                        double spread, const RngSpec& spec) {
  Vec<Scalar> x = X0;
  if (spread > 0.0) {
    for (index_t j = 0; j < mp.n; ++j)
      x(j) += Scalar(spread) * Scalar(standard_normal(
                  spec, 0, NoiseChannel::init, std::uint64_t(j)));
  }
  return x;
}

}  // namespace detail

// Roll one episode of the exploring, tilted system under the given policy.
// The effective factor shock is wtil + gamma*dt and feeds both the state
// update and the realized log excess growth.
template <class Scalar>
PathSample<Scalar> rollout_path(const MarketParams<Scalar>& mp,
                                const AffineGamePolicy<Scalar>& policy,
                                const detail::PsiFactors<Scalar>& pf,
                                const Vec<Scalar>& X0, const RngSpec& spec,
                                std::uint64_t episode_label = 0) {
  const Mat<Scalar> Btilde =
      Mat<Scalar>::Identity(mp.n, mp.n) + mp.Bmat * mp.dt;
  const NoiseDraws<Scalar> noise =
      draw_noise<Scalar>(spec, mp.K, mp.d, mp.m, mp.dt);
  PathSample<Scalar> path;
  path.steps.reserve(static_cast<std::size_t>(mp.K));
  Vec<Scalar> X = X0;
  for (index_t k = 0; k < mp.K; ++k) {
    const std::size_t kz = static_cast<std::size_t>(k);
    StepSample<Scalar> st;
    st.X = X;
    const Vec<Scalar> hbar = policy.hbar_at(k, X);
    st.gamma = policy.gamma_at(k, X);
    st.eta = policy.eta_at(k, X);
    st.wtil = noise.w[kz];
    const Vec<Scalar> v = st.eta + pf.chol[kz] * noise.v_std[kz];
    st.score_v = pf.psi_inv[kz] * (v - st.eta);
    const Vec<Scalar> h = hbar + v;
    const Vec<Scalar> w_eff = st.wtil + st.gamma * mp.dt;
    const StepExcess<Scalar> ex = log_excess_step<Scalar>(mp, X, h, w_eff);
    const Scalar pen =
        Scalar(0.5) * (st.gamma.squaredNorm() * mp.dt +
                       st.eta.dot(pf.psi_inv[kz] * st.eta));
    st.zeta = -mp.theta * ex.total - pen;
    if (!std::isfinite(double(st.zeta)))
      throw NumericalError("non-finite rollout reward at episode " +
                           std::to_string(episode_label) + ", step " +
                           std::to_string(k));
    path.total += st.zeta;
    path.steps.push_back(std::move(st));
    X = mp.b * mp.dt + Btilde * X + mp.Lambda * w_eff;
    if (!X.allFinite())
      throw NumericalError("non-finite state in rollout at episode " +
                           std::to_string(episode_label) + ", step " +
                           std::to_string(k));
  }
  path.X_terminal = X;
  return path;
}

// Batch of independent episodes; episode i uses stream episode_offset + i of
// the given seed, so batches are reproducible and non-overlapping by
// construction.
template <class Scalar>
RolloutBatch<Scalar> rollout_batch(const MarketParams<Scalar>& mp,
                                   const ExplorationSchedule<Scalar>& sched,
                                   const AffineGamePolicy<Scalar>& policy,
                                   const Vec<Scalar>& X0, std::size_t n_paths,
                                   std::uint64_t seed, double x0_spread = 0.0,
                                   std::uint64_t episode_offset = 0) {
  if (n_paths == 0) throw SchemaError("batch must contain at least one path");
  const auto pf = detail::psi_factors<Scalar>(mp, sched);
  RolloutBatch<Scalar> batch;
  batch.paths.reserve(n_paths);
  for (std::size_t i = 0; i < n_paths; ++i) {
    const RngSpec spec{seed, episode_offset + i};
    const Vec<Scalar> x0 =
        detail::jittered_x0<Scalar>(mp, X0, x0_spread, spec);
    batch.paths.push_back(
        rollout_path<Scalar>(mp, policy, pf, x0, spec, episode_offset + i));
  }
  return batch;
}

// Ridge-regularized second moment of the augmented state (X, 1) at step k,
// the preconditioner of the natural-gradient update.
template <class Scalar>
Mat<Scalar> estimate_state_cov(const RolloutBatch<Scalar>& batch, index_t k,
                               double ridge = 1e-6) {
  if (batch.paths.empty()) throw SchemaError("batch must contain at least one path");
  const index_t n = batch.paths.front().steps.front().X.size();
  if (k < 0 || k >= static_cast<index_t>(batch.paths.front().steps.size()))
    throw SchemaError("step index out of range");
  Mat<Scalar> acc = Mat<Scalar>::Zero(n + 1, n + 1);
  Vec<Scalar> xt(n + 1);
  for (const auto& path : batch.paths) {
    xt.head(n) = path.steps[static_cast<std::size_t>(k)].X;
    xt(n) = Scalar(1);
    acc += xt * xt.transpose();
  }
  acc /= Scalar(batch.paths.size());
  const Scalar lam =
      Scalar(ridge) * acc.trace() / Scalar(n + 1);
  return acc + lam * Mat<Scalar>::Identity(n + 1, n + 1);
}

// ============================ gradient blocks ==============================

// Objective gradients with respect to the augmented parameter blocks
// [D_k | d_k] (m x (n+1)), [E_k | e_k] (d x (n+1)), [F_k | f_k] (m x (n+1)).
// The score-function estimator also reports per-coordinate standard errors;
// state_cov carries the per-step preconditioners matching the estimator
// (empirical for sampled rollouts, exact moments for the exact estimator).
template <class Scalar>
struct GradientBlocks {
  std::vector<Mat<Scalar>> D;  // K entries, m x (n+1)
  std::vector<Mat<Scalar>> E;  // K entries, d x (n+1)
  std::vector<Mat<Scalar>> F;  // K entries, m x (n+1)
  std::vector<Mat<Scalar>> D_se, E_se, F_se;  // empty unless score estimator
  std::vector<Mat<Scalar>> state_cov;         // K entries, (n+1) x (n+1)
  McEstimate objective;

  double policy_grad_norm() const {
    double s = 0.0;
    for (const auto& g : D) s += double(g.squaredNorm());
    return std::sqrt(s);
  }
  double tilt_grad_norm() const {
    double s = 0.0;
    for (const auto& g : E) s += double(g.squaredNorm());
    for (const auto& g : F) s += double(g.squaredNorm());
    return std::sqrt(s);
  }
};

// Score-function gradients from a recorded batch: reward-to-go with a
// per-step batch-mean baseline times the relevant density score, plus the
// direct penalty gradients of the tilt blocks.
template <class Scalar>
GradientBlocks<Scalar> score_gradients_from_batch(
    const MarketParams<Scalar>& mp, const ExplorationSchedule<Scalar>& sched,
    const AffineGamePolicy<Scalar>& policy, const RolloutBatch<Scalar>& batch,
    double precond_ridge = 1e-6) {
  const std::size_t B = batch.paths.size();
  if (B < 2) throw SchemaError("score gradients need a batch of >= 2 paths");
  const std::size_t KZ = static_cast<std::size_t>(mp.K);
  const auto pf = detail::psi_factors<Scalar>(mp, sched);

  // Reward-to-go per path/step and its per-step batch mean (baseline).
  std::vector<std::vector<Scalar>> togo(B, std::vector<Scalar>(KZ));
  std::vector<Scalar> baseline(KZ, Scalar(0));
  for (std::size_t i = 0; i < B; ++i) {
    Scalar acc = Scalar(0);
    for (std::size_t k = KZ; k-- > 0;) {
      acc += batch.paths[i].steps[k].zeta;
      togo[i][k] = acc;
      baseline[k] += acc;
    }
  }
  for (auto& b : baseline) b /= Scalar(B);

  GradientBlocks<Scalar> gb;
  gb.D.assign(KZ, Mat<Scalar>::Zero(mp.m, mp.n + 1));
  gb.E.assign(KZ, Mat<Scalar>::Zero(mp.d, mp.n + 1));
  gb.F.assign(KZ, Mat<Scalar>::Zero(mp.m, mp.n + 1));
  gb.D_se.assign(KZ, Mat<Scalar>::Zero(mp.m, mp.n + 1));
  gb.E_se.assign(KZ, Mat<Scalar>::Zero(mp.d, mp.n + 1));
  gb.F_se.assign(KZ, Mat<Scalar>::Zero(mp.m, mp.n + 1));
  std::vector<Mat<Scalar>> sqD(KZ, Mat<Scalar>::Zero(mp.m, mp.n + 1));
  std::vector<Mat<Scalar>> sqE(KZ, Mat<Scalar>::Zero(mp.d, mp.n + 1));
  std::vector<Mat<Scalar>> sqF(KZ, Mat<Scalar>::Zero(mp.m, mp.n + 1));

  Vec<Scalar> xt;
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t k = 0; k < KZ; ++k) {
      const StepSample<Scalar>& st = batch.paths[i].steps[k];
      xt.resize(mp.n + 1);
      xt.head(mp.n) = st.X;
      xt(mp.n) = Scalar(1);
      const Scalar adv = togo[i][k] - baseline[k];
      const Mat<Scalar> cD = (st.score_v * adv) * xt.transpose();
      const Mat<Scalar> cF =
          (st.score_v * adv - pf.psi_inv[k] * st.eta) * xt.transpose();
      const Mat<Scalar> cE =
          (st.wtil * adv - st.gamma * mp.dt) * xt.transpose();
      gb.D[k] += cD;
      gb.F[k] += cF;
      gb.E[k] += cE;
      sqD[k] += cD.cwiseProduct(cD);
      sqF[k] += cF.cwiseProduct(cF);
      sqE[k] += cE.cwiseProduct(cE);
    }
  }
  const Scalar Bs = Scalar(B);
  for (std::size_t k = 0; k < KZ; ++k) {
    gb.D[k] /= Bs;
    gb.E[k] /= Bs;
    gb.F[k] /= Bs;
    const auto se = [&](const Mat<Scalar>& sq, const Mat<Scalar>& mean) {
      const Mat<Scalar> var =
          ((sq / Bs) - mean.cwiseProduct(mean)).cwiseMax(Scalar(0)) *
          (Bs / (Bs - Scalar(1)));
      return Mat<Scalar>((var / Bs).cwiseSqrt());
    };
    gb.D_se[k] = se(sqD[k], gb.D[k]);
    gb.E_se[k] = se(sqE[k], gb.E[k]);
    gb.F_se[k] = se(sqF[k], gb.F[k]);
  }
  gb.state_cov.reserve(KZ);
  for (index_t k = 0; k < mp.K; ++k)
    gb.state_cov.push_back(
        estimate_state_cov<Scalar>(batch, k, precond_ridge));

  // Objective estimate from the same batch.
  double s1 = 0.0, s2 = 0.0;
  for (const auto& path : batch.paths) {
    s1 += double(path.total);
    s2 += double(path.total) * double(path.total);
  }
  const double N = static_cast<double>(B);
  gb.objective.mean = s1 / N;
  gb.objective.std_error = std::sqrt(
      std::max(0.0, (s2 - s1 * s1 / N) / (N - 1.0)) / N);
  gb.objective.n_paths = B;
  return gb;
}

// ===================== exact gradients (moment propagation) ================

namespace detail {

// Quadratic form of the expected per-step objective contribution
// zeta_k(X) = 0.5 X'Gamma X + beta'X + kappa for an affine policy step.
template <class Scalar>
struct StageQuadratic {
  Mat<Scalar> Gamma;
  Vec<Scalar> beta;
  Scalar kappa = Scalar(0);
};

template <class Scalar>
StageQuadratic<Scalar> stage_quadratic(const MarketParams<Scalar>& mp,
                                       const Mat<Scalar>& psi_k,
                                       const Mat<Scalar>& psi_inv,
                                       const AffineGamePolicy<Scalar>& pol,
                                       index_t k) {
  const std::size_t kz = static_cast<std::size_t>(k);
  const Mat<Scalar> gram = mp.Sigma * mp.Sigma.transpose();
  const Mat<Scalar> Z = pol.D[kz] + pol.F[kz];
  const Vec<Scalar> z0 = pol.dvec[kz] + pol.fvec[kz];
  const Mat<Scalar>& E = pol.E[kz];
  const Vec<Scalar>& e = pol.evec[kz];
  const Mat<Scalar>& F = pol.F[kz];
  const Vec<Scalar>& f = pol.fvec[kz];
  const Scalar th_dt = mp.theta * mp.dt;

  StageQuadratic<Scalar> q;
  q.Gamma = th_dt * (Z.transpose() * gram * Z) -
            th_dt * (Z.transpose() * mp.A + mp.A.transpose() * Z) -
            th_dt * (Z.transpose() * mp.Sigma * E +
                     E.transpose() * mp.Sigma.transpose() * Z) -
            mp.dt * E.transpose() * E - F.transpose() * psi_inv * F;
  q.Gamma = Scalar(0.5) * (q.Gamma + q.Gamma.transpose());
  q.beta = th_dt * (Z.transpose() * (gram * z0) - Z.transpose() * mp.a -
                    mp.A.transpose() * z0 + mp.Cvec -
                    (E.transpose() * (mp.Sigma.transpose() * z0) +
                     Z.transpose() * (mp.Sigma * e) -
                     E.transpose() * mp.Xi)) -
           mp.dt * E.transpose() * e - F.transpose() * (psi_inv * f);
  q.kappa = th_dt * (Scalar(0.5) * z0.dot(gram * z0) - z0.dot(mp.a) -
                     z0.dot(mp.Sigma * e) + mp.Xi.dot(e) +
                     Scalar(0.5) * (psi_k * gram).trace() -
                     Scalar(0.5) * mp.Xi.squaredNorm() + mp.c) -
            Scalar(0.5) * mp.dt * e.squaredNorm() -
            Scalar(0.5) * f.dot(psi_inv * f);
  return q;
}

// Packs E[(V X + v0) (X, 1)'] given first/second moments of X.
template <class Scalar>
Mat<Scalar> pack_expected_outer(const Mat<Scalar>& V, const Vec<Scalar>& v0,
                                const Vec<Scalar>& m, const Mat<Scalar>& Sbar) {
  Mat<Scalar> out(V.rows(), V.cols() + 1);
  out.leftCols(V.cols()) = V * Sbar + v0 * m.transpose();
  out.col(V.cols()) = V * m + v0;
  return out;
}

}  // namespace detail

// Exact gradient of the expected objective C = sum_k E[zeta_k] for an
// affine policy, by propagating the tilted state moments forward and the
// value adjoints backward. The initial state is X0_mean with covariance
// X0_cov (the rollout jitter distribution).
template <class Scalar>
GradientBlocks<Scalar> exact_game_gradients(const MarketParams<Scalar>& mp,
                                            const ExplorationSchedule<Scalar>& sched,
                                            const AffineGamePolicy<Scalar>& policy,
                                            const Vec<Scalar>& X0_mean,
                                            const Mat<Scalar>& X0_cov,
                                            double precond_ridge = 1e-6) {
  if (policy.horizon() != mp.K)
    throw SchemaError("policy must have K entries");
  const std::size_t KZ = static_cast<std::size_t>(mp.K);
  const auto pf = detail::psi_factors<Scalar>(mp, sched);
  const Mat<Scalar> gram = mp.Sigma * mp.Sigma.transpose();
  const Mat<Scalar> Btilde =
      Mat<Scalar>::Identity(mp.n, mp.n) + mp.Bmat * mp.dt;

  // Forward pass: tilted moments and per-step quadratics.
  std::vector<Vec<Scalar>> mean(KZ + 1);
  std::vector<Mat<Scalar>> cov(KZ + 1);
  std::vector<Mat<Scalar>> Mk(KZ);
  std::vector<detail::StageQuadratic<Scalar>> quad(KZ);
  mean[0] = X0_mean;
  cov[0] = X0_cov;
  double objective = 0.0;
  for (index_t k = 0; k < mp.K; ++k) {
    const std::size_t kz = static_cast<std::size_t>(k);
    quad[kz] = detail::stage_quadratic<Scalar>(mp, sched.at(k),
                                               pf.psi_inv[kz], policy, k);
    objective += double(
        Scalar(0.5) * (quad[kz].Gamma * cov[kz]).trace() +
        Scalar(0.5) * mean[kz].dot(quad[kz].Gamma * mean[kz]) +
        quad[kz].beta.dot(mean[kz]) + quad[kz].kappa);
    Mk[kz] = Btilde + mp.Lambda * policy.E[kz] * mp.dt;
    mean[kz + 1] = Mk[kz] * mean[kz] + mp.b * mp.dt +
                   mp.Lambda * policy.evec[kz] * mp.dt;
    cov[kz + 1] = Mk[kz] * cov[kz] * Mk[kz].transpose() +
                  mp.Lambda * mp.Lambda.transpose() * mp.dt;
    cov[kz + 1] = Scalar(0.5) * (cov[kz + 1] + cov[kz + 1].transpose());
  }

  // Backward pass: adjoints of the mean and covariance.
  GradientBlocks<Scalar> gb;
  gb.D.assign(KZ, Mat<Scalar>::Zero(mp.m, mp.n + 1));
  gb.E.assign(KZ, Mat<Scalar>::Zero(mp.d, mp.n + 1));
  gb.F.assign(KZ, Mat<Scalar>::Zero(mp.m, mp.n + 1));
  Vec<Scalar> lambda = Vec<Scalar>::Zero(mp.n);
  Mat<Scalar> Pi = Mat<Scalar>::Zero(mp.n, mp.n);
  for (index_t k = mp.K - 1; k >= 0; --k) {
    const std::size_t kz = static_cast<std::size_t>(k);
    const Mat<Scalar> Z = policy.D[kz] + policy.F[kz];
    const Vec<Scalar> z0 = policy.dvec[kz] + policy.fvec[kz];
    const Mat<Scalar> Sbar =
        cov[kz] + mean[kz] * mean[kz].transpose();
    const Scalar th_dt = mp.theta * mp.dt;

    // d zeta / d hbar = theta dt (G z - a - A X - Sigma gamma), affine in X.
    const Mat<Scalar> Vh =
        th_dt * (gram * Z - mp.A - mp.Sigma * policy.E[kz]);
    const Vec<Scalar> vh =
        th_dt * (gram * z0 - mp.a - mp.Sigma * policy.evec[kz]);
    gb.D[kz] = detail::pack_expected_outer<Scalar>(Vh, vh, mean[kz], Sbar);
    // d zeta / d eta adds the direct penalty term -inv(Psi) eta.
    const Mat<Scalar> Vf = Vh - pf.psi_inv[kz] * policy.F[kz];
    const Vec<Scalar> vf = vh - pf.psi_inv[kz] * policy.fvec[kz];
    gb.F[kz] = detail::pack_expected_outer<Scalar>(Vf, vf, mean[kz], Sbar);
    // d zeta / d gamma = -theta dt (Sigma'z - Xi) - dt gamma, plus the
    // dynamics channel through the tilted transition.
    const Mat<Scalar> Vg =
        -th_dt * (mp.Sigma.transpose() * Z) - mp.dt * policy.E[kz];
    const Vec<Scalar> vg =
        -th_dt * (mp.Sigma.transpose() * z0 - mp.Xi) -
        mp.dt * policy.evec[kz];
    gb.E[kz] = detail::pack_expected_outer<Scalar>(Vg, vg, mean[kz], Sbar);
    gb.E[kz].leftCols(mp.n) +=
        mp.dt * mp.Lambda.transpose() *
        (lambda * mean[kz].transpose() + Scalar(2) * Pi * Mk[kz] * cov[kz]);
    gb.E[kz].col(mp.n) += mp.dt * mp.Lambda.transpose() * lambda;

    lambda = quad[kz].Gamma * mean[kz] + quad[kz].beta +
             Mk[kz].transpose() * lambda;
    Pi = Scalar(0.5) * quad[kz].Gamma + Mk[kz].transpose() * Pi * Mk[kz];
  }

  gb.state_cov.reserve(KZ);
  for (std::size_t kz = 0; kz < KZ; ++kz) {
    const Mat<Scalar> Sbar =
        cov[kz] + mean[kz] * mean[kz].transpose();
    Mat<Scalar> aug(mp.n + 1, mp.n + 1);
    aug.topLeftCorner(mp.n, mp.n) = Sbar;
    aug.topRightCorner(mp.n, 1) = mean[kz];
    aug.bottomLeftCorner(1, mp.n) = mean[kz].transpose();
    aug(mp.n, mp.n) = Scalar(1);
    const Scalar lam = Scalar(precond_ridge) * aug.trace() / Scalar(mp.n + 1);
    gb.state_cov.push_back(
        Mat<Scalar>(aug + lam * Mat<Scalar>::Identity(mp.n + 1, mp.n + 1)));
  }
  gb.objective.mean = objective;
  gb.objective.std_error = 0.0;
  gb.objective.n_paths = 0;
  return gb;
}

// =================== finite-difference gradients (oracle) ==================

namespace detail {

// Mean observable objective over a fixed set of episode streams: with the
// seed and offsets held fixed this is a deterministic, smooth function of
// the policy parameters, so central differences converge.
template <class Scalar>
double crn_game_objective(const MarketParams<Scalar>& mp,
                          const ExplorationSchedule<Scalar>& sched,
                          const AffineGamePolicy<Scalar>& policy,
                          const Vec<Scalar>& X0, std::size_t n_paths,
                          std::uint64_t seed, double x0_spread,
                          std::uint64_t episode_offset) {
  const auto batch = rollout_batch<Scalar>(mp, sched, policy, X0, n_paths,
                                           seed, x0_spread, episode_offset);
  double acc = 0.0;
  for (const auto& p : batch.paths) acc += double(p.total);
  return acc / static_cast<double>(n_paths);
}

}  // namespace detail

// Common-random-number central finite differences on every policy
// coordinate. Expensive; intended as an estimator cross-check.
template <class Scalar>
GradientBlocks<Scalar> fd_game_gradients(const MarketParams<Scalar>& mp,
                                         const ExplorationSchedule<Scalar>& sched,
                                         const AffineGamePolicy<Scalar>& policy,
                                         const Vec<Scalar>& X0,
                                         const TrainConfig& cfg,
                                         std::uint64_t episode_offset = 0) {
  const std::size_t KZ = static_cast<std::size_t>(mp.K);
  const double h = cfg.fd_step;
  AffineGamePolicy<Scalar> probe = policy;
  GradientBlocks<Scalar> gb;
  gb.D.assign(KZ, Mat<Scalar>::Zero(mp.m, mp.n + 1));
  gb.E.assign(KZ, Mat<Scalar>::Zero(mp.d, mp.n + 1));
  gb.F.assign(KZ, Mat<Scalar>::Zero(mp.m, mp.n + 1));

  const auto value = [&](const AffineGamePolicy<Scalar>& pol) {
    return detail::crn_game_objective<Scalar>(mp, sched, pol, X0, cfg.batch,
                                              cfg.seed, cfg.x0_spread,
                                              episode_offset);
  };
  const auto central = [&](Scalar& coord, double& out) {
    const Scalar keep = coord;
    coord = keep + Scalar(h);
    const double up = value(probe);
    coord = keep - Scalar(h);
    const double dn = value(probe);
    coord = keep;
    out = (up - dn) / (2.0 * h);
  };

  for (std::size_t kz = 0; kz < KZ; ++kz) {
    double g = 0.0;
    for (index_t i = 0; i < mp.m; ++i) {
      for (index_t j = 0; j < mp.n; ++j) {
        central(probe.D[kz](i, j), g);
        gb.D[kz](i, j) = Scalar(g);
        central(probe.F[kz](i, j), g);
        gb.F[kz](i, j) = Scalar(g);
      }
      central(probe.dvec[kz](i), g);
      gb.D[kz](i, mp.n) = Scalar(g);
      central(probe.fvec[kz](i), g);
      gb.F[kz](i, mp.n) = Scalar(g);
    }
    for (index_t i = 0; i < mp.d; ++i) {
      for (index_t j = 0; j < mp.n; ++j) {
        central(probe.E[kz](i, j), g);
        gb.E[kz](i, j) = Scalar(g);
      }
      central(probe.evec[kz](i), g);
      gb.E[kz](i, mp.n) = Scalar(g);
    }
  }

  const auto base = rollout_batch<Scalar>(mp, sched, policy, X0, cfg.batch,
                                          cfg.seed, cfg.x0_spread,
                                          episode_offset);
  double s1 = 0.0, s2 = 0.0;
  for (const auto& p : base.paths) {
    s1 += double(p.total);
    s2 += double(p.total) * double(p.total);
  }
  const double N = static_cast<double>(cfg.batch);
  gb.objective.mean = s1 / N;
  gb.objective.std_error =
      std::sqrt(std::max(0.0, (s2 - s1 * s1 / N) / (N - 1.0)) / N);
  gb.objective.n_paths = cfg.batch;
  gb.state_cov.reserve(KZ);
  for (index_t k = 0; k < mp.K; ++k)
    gb.state_cov.push_back(
        estimate_state_cov<Scalar>(base, k, cfg.precond_ridge));
  return gb;
}

// Dispatcher over the three estimators. The sampled estimators use episode
// streams [episode_offset, episode_offset + batch).
template <class Scalar>
GradientBlocks<Scalar> policy_gradient_game(const MarketParams<Scalar>& mp,
                                            const ExplorationSchedule<Scalar>& sched,
                                            const AffineGamePolicy<Scalar>& policy,
                                            const Vec<Scalar>& X0,
                                            const TrainConfig& cfg,
                                            std::uint64_t episode_offset = 0) {
  if (mp.theta <= Scalar(0))
    throw SchemaError("game training requires theta > 0 (theta = 0 is Kelly mode)");
  if (policy.horizon() != mp.K)
    throw SchemaError("policy must have K entries");
  switch (cfg.estimator) {
    case GradientEstimator::exact: {
      const Mat<Scalar> cov0 = Scalar(cfg.x0_spread) * Scalar(cfg.x0_spread) *
                               Mat<Scalar>::Identity(mp.n, mp.n);
      return exact_game_gradients<Scalar>(mp, sched, policy, X0, cov0,
                                          cfg.precond_ridge);
    }
    case GradientEstimator::finite_difference:
      return fd_game_gradients<Scalar>(mp, sched, policy, X0, cfg,
                                       episode_offset);
    case GradientEstimator::score_function:
    default: {
      if (cfg.batch < 2) throw SchemaError("score gradients need batch >= 2");
      const auto batch =
          rollout_batch<Scalar>(mp, sched, policy, X0, cfg.batch, cfg.seed,
                                cfg.x0_spread, episode_offset);
      return score_gradients_from_batch<Scalar>(mp, sched, policy, batch,
                                                cfg.precond_ridge);
    }
  }
}

// ============================ natural gradient =============================

// One preconditioned update: descent for the allocation block, ascent for
// the tilt blocks (simultaneous by default; `alternating` splits them over
// successive iterations). The preconditioner is applied on the state side:
// Theta <- Theta -/+ step * grad * inv(state_cov).
template <class Scalar>
void npg_update(AffineGamePolicy<Scalar>& policy,
                const GradientBlocks<Scalar>& grads,
                const std::vector<Mat<Scalar>>& state_cov,
                const TrainConfig& cfg, std::size_t iteration) {
  const std::size_t KZ = policy.D.size();
  if (grads.D.size() != KZ || state_cov.size() != KZ)
    throw SchemaError("gradient/preconditioner horizon mismatch");
  const double step = schedule_step(cfg, iteration);
  const bool update_policy = !cfg.alternating || (iteration % 2 == 1);
  const bool update_tilts = !cfg.alternating || (iteration % 2 == 0);
  const index_t n = policy.D.front().cols();
  for (std::size_t kz = 0; kz < KZ; ++kz) {
    Eigen::LLT<Mat<Scalar>> llt(state_cov[kz]);
    if (llt.info() != Eigen::Success)
      throw NumericalError("state second moment not positive definite");
    const auto precondition = [&](const Mat<Scalar>& g) {
      // right-multiply by inv(state_cov): solve cov' Y' = g'
      return Mat<Scalar>(llt.solve(g.transpose()).transpose());
    };
    if (update_policy) {
      const Mat<Scalar> nat = precondition(grads.D[kz]);
      policy.D[kz] -= Scalar(step) * nat.leftCols(n);
      policy.dvec[kz] -= Scalar(step) * nat.col(n);
    }
    if (update_tilts) {
      const Mat<Scalar> natE = precondition(grads.E[kz]);
      policy.E[kz] += Scalar(step) * natE.leftCols(n);
      policy.evec[kz] += Scalar(step) * natE.col(n);
      if (!cfg.freeze_eta) {
        const Mat<Scalar> natF = precondition(grads.F[kz]);
        policy.F[kz] += Scalar(step) * natF.leftCols(n);
        policy.fvec[kz] += Scalar(step) * natF.col(n);
      }
    }
  }
}

// ============================== training ===================================

struct TraceRow {
  std::size_t iteration = 0;
  std::size_t episodes_used = 0;
  double objective = 0.0;
  double objective_se = 0.0;
  double policy_grad_norm = 0.0;
  double tilt_grad_norm = 0.0;
  double step_size = 0.0;
  // Distances to the analytic saddle policy (NaN when unavailable).
  double dist_D = std::numeric_limits<double>::quiet_NaN();
  double dist_d = std::numeric_limits<double>::quiet_NaN();
  double dist_E = std::numeric_limits<double>::quiet_NaN();
  double dist_e = std::numeric_limits<double>::quiet_NaN();
  double norm_F = 0.0;
  double norm_f = 0.0;
};

template <class Scalar>
struct GameTrainResult {
  AffineGamePolicy<Scalar> policy;
  std::vector<TraceRow> trace;
  bool converged = false;
  bool diverged = false;
  bool has_analytic = false;
  std::size_t iterations_run = 0;
};

namespace detail {

template <class Scalar>
double max_block_distance(const std::vector<Mat<Scalar>>& A,
                          const std::vector<Mat<Scalar>>& B) {
  double worst = 0.0;
  for (std::size_t k = 0; k < A.size(); ++k)
    worst = std::max(worst, double((A[k] - B[k]).norm()));
  return worst;
}

template <class Scalar>
double max_vec_distance(const std::vector<Vec<Scalar>>& A,
                        const std::vector<Vec<Scalar>>& B) {
  double worst = 0.0;
  for (std::size_t k = 0; k < A.size(); ++k)
    worst = std::max(worst, double((A[k] - B[k]).norm()));
  return worst;
}

template <class Scalar>
double max_block_norm(const std::vector<Mat<Scalar>>& A) {
  double worst = 0.0;
  for (const auto& M : A) worst = std::max(worst, double(M.norm()));
  return worst;
}

template <class Scalar>
double max_vec_norm(const std::vector<Vec<Scalar>>& A) {
  double worst = 0.0;
  for (const auto& v : A) worst = std::max(worst, double(v.norm()));
  return worst;
}

}  // namespace detail

// Natural-policy-gradient training of the full game from the zero policy.
// Stops early when both gradient norms stay below `tolerance` for
// `patience` consecutive updates; aborts (with the trace retained) when the
// objective magnitude exceeds the divergence threshold.
template <class Scalar>
GameTrainResult<Scalar> train_game(const MarketParams<Scalar>& mp,
                                   const ExplorationSchedule<Scalar>& sched,
                                   const Vec<Scalar>& X0,
                                   const TrainConfig& cfg) {
  if (mp.theta <= Scalar(0))
    throw SchemaError("game training requires theta > 0 (theta = 0 is Kelly mode)");
  if (cfg.batch < 2) throw SchemaError("batch must be >= 2");
  if (cfg.episodes < cfg.batch)
    throw SchemaError("episodes must cover at least one batch");

  GameTrainResult<Scalar> result;
  result.policy = AffineGamePolicy<Scalar>::zero(mp);

  // Analytic saddle policy for trace distances, when solvable.
  AffineGamePolicy<Scalar> analytic;
  try {
    const auto sr = solve<Scalar>(mp, sched);
    analytic = analytic_game_policy<Scalar>(mp, sr.value);
    result.has_analytic = true;
  } catch (const std::exception&) {
    result.has_analytic = false;
  }

  const std::size_t iterations = cfg.episodes / cfg.batch;
  int calm_streak = 0;
  for (std::size_t it = 1; it <= iterations; ++it) {
    const std::uint64_t offset =
        static_cast<std::uint64_t>((it - 1) * cfg.batch);
    const GradientBlocks<Scalar> grads = policy_gradient_game<Scalar>(
        mp, sched, result.policy, X0, cfg, offset);

    TraceRow row;
    row.iteration = it;
    row.episodes_used = it * cfg.batch;
    row.objective = grads.objective.mean;
    row.objective_se = grads.objective.std_error;
    row.policy_grad_norm = grads.policy_grad_norm();
    row.tilt_grad_norm = grads.tilt_grad_norm();
    row.step_size = schedule_step(cfg, it);
    if (result.has_analytic) {
      row.dist_D = detail::max_block_distance<Scalar>(result.policy.D,
                                                      analytic.D);
      row.dist_d = detail::max_vec_distance<Scalar>(result.policy.dvec,
                                                    analytic.dvec);
      row.dist_E = detail::max_block_distance<Scalar>(result.policy.E,
                                                      analytic.E);
      row.dist_e = detail::max_vec_distance<Scalar>(result.policy.evec,
                                                    analytic.evec);
    }
    row.norm_F = detail::max_block_norm<Scalar>(result.policy.F);
    row.norm_f = detail::max_vec_norm<Scalar>(result.policy.fvec);
    result.trace.push_back(row);
    result.iterations_run = it;

    if (std::abs(grads.objective.mean) > cfg.divergence_threshold) {
      result.diverged = true;
      break;
    }
    npg_update<Scalar>(result.policy, grads, grads.state_cov, cfg, it);

    if (cfg.tolerance > 0.0) {
      if (row.policy_grad_norm + row.tilt_grad_norm < cfg.tolerance) {
        if (++calm_streak >= cfg.patience) {
          result.converged = true;
          break;
        }
      } else {
        calm_streak = 0;
      }
    }
  }
  return result;
}

// ============================ Kelly training ===============================

// Allocation-only affine policy h_k(X) = D_k X + d_k for the growth
// objective E[R_T - R_0] (no tilts, no exploration penalty).
template <class Scalar>
struct KellyPolicy {
  std::vector<Mat<Scalar>> D;     // K entries, m x n
  std::vector<Vec<Scalar>> dvec;  // K entries, m

  static KellyPolicy zero(const MarketParams<Scalar>& mp) {
    KellyPolicy pol;
    pol.D.assign(static_cast<std::size_t>(mp.K), Mat<Scalar>::Zero(mp.m, mp.n));
    pol.dvec.assign(static_cast<std::size_t>(mp.K), Vec<Scalar>::Zero(mp.m));
    return pol;
  }
};

// The maximizer of the growth objective in closed form: D_k = (SS')^{-1} A,
// d_k = (SS')^{-1} a for every step.
template <class Scalar>
KellyPolicy<Scalar> analytic_kelly_policy(const MarketParams<Scalar>& mp) {
  const auto dc = derive_constants(mp);
  KellyPolicy<Scalar> pol;
  pol.D.assign(static_cast<std::size_t>(mp.K),
               Mat<Scalar>(dc.SigmaGramInv * mp.A));
  pol.dvec.assign(static_cast<std::size_t>(mp.K),
                  Vec<Scalar>(dc.SigmaGramInv * mp.a));
  return pol;
}

template <class Scalar>
struct KellyGradients {
  std::vector<Mat<Scalar>> D;  // K entries, m x (n+1), ascent direction
  std::vector<Mat<Scalar>> state_cov;
  McEstimate objective;
};

// Exact growth-objective gradients by factor-moment propagation.
template <class Scalar>
KellyGradients<Scalar> exact_kelly_gradients(const MarketParams<Scalar>& mp,
                                             const KellyPolicy<Scalar>& policy,
                                             const Vec<Scalar>& X0_mean,
                                             const Mat<Scalar>& X0_cov,
                                             double precond_ridge = 1e-6) {
  const std::size_t KZ = static_cast<std::size_t>(mp.K);
  if (policy.D.size() != KZ) throw SchemaError("policy must have K entries");
  const auto dc = derive_constants(mp);
  const Mat<Scalar>& G = dc.SigmaGram;
  KellyGradients<Scalar> kg;
  kg.D.assign(KZ, Mat<Scalar>::Zero(mp.m, mp.n + 1));
  kg.state_cov.reserve(KZ);
  Vec<Scalar> mu = X0_mean;
  Mat<Scalar> S = X0_cov;
  for (index_t k = 0; k < mp.K; ++k) {
    const std::size_t kz = static_cast<std::size_t>(k);
    const Mat<Scalar> Sbar = S + mu * mu.transpose();
    const Mat<Scalar>& Dk = policy.D[kz];
    const Vec<Scalar>& dk = policy.dvec[kz];
    kg.D[kz].leftCols(mp.n) =
        (-G * (Dk * Sbar + dk * mu.transpose()) + mp.a * mu.transpose() +
         mp.A * Sbar) *
        mp.dt;
    kg.D[kz].col(mp.n) = (-G * (Dk * mu + dk) + mp.a + mp.A * mu) * mp.dt;

    Mat<Scalar> aug(mp.n + 1, mp.n + 1);
    aug.topLeftCorner(mp.n, mp.n) = Sbar;
    aug.topRightCorner(mp.n, 1) = mu;
    aug.bottomLeftCorner(1, mp.n) = mu.transpose();
    aug(mp.n, mp.n) = Scalar(1);
    const Scalar lam = Scalar(precond_ridge) * aug.trace() / Scalar(mp.n + 1);
    kg.state_cov.push_back(
        Mat<Scalar>(aug + lam * Mat<Scalar>::Identity(mp.n + 1, mp.n + 1)));

    mu = mp.b * mp.dt + dc.Btilde * mu;
    S = dc.Btilde * S * dc.Btilde.transpose() +
        mp.Lambda * mp.Lambda.transpose() * mp.dt;
    S = Scalar(0.5) * (S + S.transpose());
  }
  kg.objective.mean = double(kelly_objective_exact<Scalar>(
      mp, policy.D, policy.dvec, X0_mean, X0_cov));
  kg.objective.std_error = 0.0;
  kg.objective.n_paths = 0;
  return kg;
}

// Stochastic growth-objective gradients from sampled state paths: the state
// is exogenous and the expected step growth given X_k is quadratic in h, so
// (-G h_k + a + A X_k) dt is an unbiased per-path gradient of the objective
// along the sampled states.  The martingale term h'Sigma w_k carries no
// gradient information and is dropped as an exact control variate; the
// objective estimate itself keeps the realized rewards.
template <class Scalar>
KellyGradients<Scalar> stochastic_kelly_gradients(const MarketParams<Scalar>& mp,
                                                  const KellyPolicy<Scalar>& policy,
                                                  const Vec<Scalar>& X0,
                                                  const TrainConfig& cfg,
                                                  std::uint64_t episode_offset = 0) {
  const std::size_t KZ = static_cast<std::size_t>(mp.K);
  if (policy.D.size() != KZ) throw SchemaError("policy must have K entries");
  if (cfg.batch < 2) throw SchemaError("batch must be >= 2");
  const auto dc = derive_constants(mp);
  const Mat<Scalar>& G = dc.SigmaGram;
  KellyGradients<Scalar> kg;
  kg.D.assign(KZ, Mat<Scalar>::Zero(mp.m, mp.n + 1));
  std::vector<Mat<Scalar>> cov_acc(KZ, Mat<Scalar>::Zero(mp.n + 1, mp.n + 1));
  double s1 = 0.0, s2 = 0.0;
  Vec<Scalar> xt(mp.n + 1);
  for (std::size_t i = 0; i < cfg.batch; ++i) {
    const RngSpec spec{cfg.seed, episode_offset + i};
    const Vec<Scalar> x0 =
        detail::jittered_x0<Scalar>(mp, X0, cfg.x0_spread, spec);
    const auto noise = draw_noise<Scalar>(spec, mp.K, mp.d, mp.m, mp.dt);
    const auto X = simulate_factors<Scalar>(mp, x0, noise);
    double total = 0.0;
    for (index_t k = 0; k < mp.K; ++k) {
      const std::size_t kz = static_cast<std::size_t>(k);
      const Vec<Scalar>& Xk = X[kz];
      const Vec<Scalar> h = policy.D[kz] * Xk + policy.dvec[kz];
      const auto ex = log_excess_step<Scalar>(mp, Xk, h, noise.w[kz]);
      total += double(ex.total);
      const Vec<Scalar> gh = (-G * h + mp.a + mp.A * Xk) * mp.dt;
      xt.head(mp.n) = Xk;
      xt(mp.n) = Scalar(1);
      kg.D[kz] += gh * xt.transpose();
      cov_acc[kz] += xt * xt.transpose();
    }
    s1 += total;
    s2 += total * total;
  }
  const Scalar Bs = Scalar(cfg.batch);
  for (std::size_t kz = 0; kz < KZ; ++kz) {
    kg.D[kz] /= Bs;
    cov_acc[kz] /= Bs;
    const Scalar lam =
        Scalar(cfg.precond_ridge) * cov_acc[kz].trace() / Scalar(mp.n + 1);
    kg.state_cov.push_back(Mat<Scalar>(
        cov_acc[kz] + lam * Mat<Scalar>::Identity(mp.n + 1, mp.n + 1)));
  }
  const double N = static_cast<double>(cfg.batch);
  kg.objective.mean = s1 / N;
  kg.objective.std_error =
      std::sqrt(std::max(0.0, (s2 - s1 * s1 / N) / (N - 1.0)) / N);
  kg.objective.n_paths = cfg.batch;
  return kg;
}

template <class Scalar>
struct KellyTrainResult {
  KellyPolicy<Scalar> policy;
  std::vector<TraceRow> trace;
  bool converged = false;
  bool diverged = false;
  std::size_t iterations_run = 0;
};

// Natural-gradient ascent on the growth objective from the zero policy.
template <class Scalar>
KellyTrainResult<Scalar> train_kelly(const MarketParams<Scalar>& mp,
                                     const Vec<Scalar>& X0,
                                     const TrainConfig& cfg) {
  if (cfg.batch < 2) throw SchemaError("batch must be >= 2");
  if (cfg.episodes < cfg.batch)
    throw SchemaError("episodes must cover at least one batch");
  if (cfg.estimator == GradientEstimator::finite_difference)
    throw SchemaError("Kelly training supports the exact and score estimators");

  KellyTrainResult<Scalar> result;
  result.policy = KellyPolicy<Scalar>::zero(mp);
  const KellyPolicy<Scalar> target = analytic_kelly_policy<Scalar>(mp);

  const Mat<Scalar> cov0 = Scalar(cfg.x0_spread) * Scalar(cfg.x0_spread) *
                           Mat<Scalar>::Identity(mp.n, mp.n);
  const std::size_t iterations =
      cfg.estimator == GradientEstimator::exact
          ? std::max<std::size_t>(1, cfg.episodes / std::max<std::size_t>(
                                         1, cfg.batch))
          : cfg.episodes / cfg.batch;
  int calm_streak = 0;
  for (std::size_t it = 1; it <= iterations; ++it) {
    const std::uint64_t offset =
        static_cast<std::uint64_t>((it - 1) * cfg.batch);
    const KellyGradients<Scalar> kg =
        cfg.estimator == GradientEstimator::exact
            ? exact_kelly_gradients<Scalar>(mp, result.policy, X0, cov0,
                                            cfg.precond_ridge)
            : stochastic_kelly_gradients<Scalar>(mp, result.policy, X0, cfg,
                                                 offset);

    double gnorm = 0.0;
    for (const auto& g : kg.D) gnorm += double(g.squaredNorm());
    gnorm = std::sqrt(gnorm);

    TraceRow row;
    row.iteration = it;
    row.episodes_used = it * cfg.batch;
    row.objective = kg.objective.mean;
    row.objective_se = kg.objective.std_error;
    row.policy_grad_norm = gnorm;
    row.step_size = schedule_step(cfg, it);
    row.dist_D =
        detail::max_block_distance<Scalar>(result.policy.D, target.D);
    row.dist_d =
        detail::max_vec_distance<Scalar>(result.policy.dvec, target.dvec);
    result.trace.push_back(row);
    result.iterations_run = it;

    if (std::abs(kg.objective.mean) > cfg.divergence_threshold) {
      result.diverged = true;
      break;
    }
    const double step = schedule_step(cfg, it);
    for (std::size_t kz = 0; kz < result.policy.D.size(); ++kz) {
      Eigen::LLT<Mat<Scalar>> llt(kg.state_cov[kz]);
      if (llt.info() != Eigen::Success)
        throw NumericalError("state second moment not positive definite");
      const Mat<Scalar> nat =
          Mat<Scalar>(llt.solve(kg.D[kz].transpose()).transpose());
      result.policy.D[kz] += Scalar(step) * nat.leftCols(mp.n);
      result.policy.dvec[kz] += Scalar(step) * nat.col(mp.n);
    }

    if (cfg.tolerance > 0.0) {
      if (gnorm < cfg.tolerance) {
        if (++calm_streak >= cfg.patience) {
          result.converged = true;
          break;
        }
      } else {
        calm_streak = 0;
      }
    }
  }
  return result;
}

// ================================ critic ===================================

// Quadratic value-function approximation u_k(X) = 0.5 X'P_k X + p_k'X + r_k
// learned per step by ridge regression; the terminal triple is pinned to
// zero.
template <class Scalar>
struct CriticParams {
  std::vector<Mat<Scalar>> P;  // K+1
  std::vector<Vec<Scalar>> p;  // K+1
  std::vector<Scalar> r;       // K+1

  static CriticParams zero(const MarketParams<Scalar>& mp) {
    CriticParams cp;
    const std::size_t KZ = static_cast<std::size_t>(mp.K);
    cp.P.assign(KZ + 1, Mat<Scalar>::Zero(mp.n, mp.n));
    cp.p.assign(KZ + 1, Vec<Scalar>::Zero(mp.n));
    cp.r.assign(KZ + 1, Scalar(0));
    return cp;
  }
};

template <class Scalar>
Scalar critic_value(const CriticParams<Scalar>& critic, index_t k,
                    const Vec<Scalar>& X) {
  if (k < 0 || k >= static_cast<index_t>(critic.r.size()))
    throw SchemaError("index out of range");
  const std::size_t kz = static_cast<std::size_t>(k);
  return quad_eval<Scalar>(critic.P[kz], critic.p[kz], critic.r[kz], X);
}

template <class Scalar>
struct CriticFit {
  CriticParams<Scalar> critic;
  std::vector<std::string> warnings;
};

namespace detail {

template <class Scalar>
Vec<Scalar> critic_features(const Vec<Scalar>& X) {
  const index_t n = X.size();
  const index_t nf = n * (n + 1) / 2 + n + 1;
  Vec<Scalar> phi(nf);
  index_t idx = 0;
  for (index_t i = 0; i < n; ++i)
    for (index_t j = i; j < n; ++j)
      phi(idx++) = (i == j) ? Scalar(0.5) * X(i) * X(i) : X(i) * X(j);
  for (index_t i = 0; i < n; ++i) phi(idx++) = X(i);
  phi(idx) = Scalar(1);
  return phi;
}

template <class Scalar>
void unpack_critic_features(const Vec<Scalar>& beta, index_t n,
                            Mat<Scalar>& P, Vec<Scalar>& p, Scalar& r) {
  P = Mat<Scalar>::Zero(n, n);
  index_t idx = 0;
  for (index_t i = 0; i < n; ++i)
    for (index_t j = i; j < n; ++j) {
      if (i == j) {
        P(i, i) = beta(idx);
      } else {
        P(i, j) = beta(idx);
        P(j, i) = beta(idx);
      }
      ++idx;
    }
  p = beta.segment(idx, n);
  r = beta(idx + n);
}

}  // namespace detail

// Backward fitted-value iteration: at step k, regress the one-step target
//   y = theta * g(X_k, hbar_k, eta_k, gamma_k) * dt + u_{k+1}(X_{k+1})
// (g at the policy means, so the target is exact given the transition) onto
// quadratic features of X_k. Rank-deficient design matrices get a larger
// ridge and a warning.
template <class Scalar>
CriticFit<Scalar> fit_critic(const MarketParams<Scalar>& mp,
                             const ExplorationSchedule<Scalar>& sched,
                             const AffineGamePolicy<Scalar>& policy,
                             const RolloutBatch<Scalar>& batch,
                             double ridge = 1e-8) {
  if (mp.theta <= Scalar(0))
    throw SchemaError("critic target requires theta > 0 (theta = 0 is Kelly mode)");
  if (batch.paths.size() < 2) throw SchemaError("batch must contain >= 2 paths");
  const std::size_t KZ = static_cast<std::size_t>(mp.K);
  const index_t nf = mp.n * (mp.n + 1) / 2 + mp.n + 1;

  CriticFit<Scalar> fit;
  fit.critic = CriticParams<Scalar>::zero(mp);

  for (index_t k = mp.K - 1; k >= 0; --k) {
    const std::size_t kz = static_cast<std::size_t>(k);
    Mat<Scalar> gram_f = Mat<Scalar>::Zero(nf, nf);
    Vec<Scalar> rhs = Vec<Scalar>::Zero(nf);
    for (const auto& path : batch.paths) {
      const Vec<Scalar>& X = path.steps[kz].X;
      const Vec<Scalar>& Xn = (kz + 1 < KZ) ? path.steps[kz + 1].X
                                            : path.X_terminal;
      const Vec<Scalar> hbar = policy.hbar_at(k, X);
      const Vec<Scalar> gm = policy.gamma_at(k, X);
      const Vec<Scalar> et = policy.eta_at(k, X);
      const Scalar y =
          mp.theta * running_reward_g<Scalar>(mp, sched.at(k), X, hbar, et, gm) *
              mp.dt +
          critic_value<Scalar>(fit.critic, k + 1, Xn);
      const Vec<Scalar> phi = detail::critic_features<Scalar>(X);
      gram_f += phi * phi.transpose();
      rhs += phi * y;
    }
    Scalar lam = Scalar(ridge) *
                 std::max(Scalar(1), gram_f.trace() / Scalar(nf));
    Eigen::SelfAdjointEigenSolver<Mat<Scalar>> es(gram_f);
    const Scalar lo = es.eigenvalues().minCoeff();
    const Scalar hi = es.eigenvalues().maxCoeff();
    if (lo < Scalar(1e-10) * std::max(Scalar(1), hi)) {
      lam *= Scalar(1e6);
      fit.warnings.push_back(
          "critic design matrix rank-deficient at step " + std::to_string(k) +
          "; increased ridge");
    }
    const Mat<Scalar> reg =
        gram_f + lam * Mat<Scalar>::Identity(nf, nf);
    Eigen::LDLT<Mat<Scalar>> ldlt(reg);
    if (ldlt.info() != Eigen::Success)
      throw NumericalError("critic regression failed at step " +
                           std::to_string(k));
    const Vec<Scalar> beta = ldlt.solve(rhs);
    if (!beta.allFinite())
      throw NumericalError("critic regression failed at step " +
                           std::to_string(k));
    detail::unpack_critic_features<Scalar>(beta, mp.n, fit.critic.P[kz],
                                           fit.critic.p[kz],
                                           fit.critic.r[kz]);
  }
  return fit;
}

// ============================= actor-critic ================================

template <class Scalar>
struct ActorCriticDiagnostics {
  McEstimate objective;
  double policy_grad_norm = 0.0;
  double tilt_grad_norm = 0.0;
  std::vector<std::string> critic_warnings;
};

// One actor-critic update on a fresh batch: refit the critic on the batch,
// build one-step observable advantages
//   A_k = zeta_k + u_{k+1}(X_{k+1}) - u_k(X_k),
// form score-function actor gradients with the advantage in place of the
// reward-to-go, and apply the natural-gradient update.
template <class Scalar>
ActorCriticDiagnostics<Scalar> actor_critic_step(
    const MarketParams<Scalar>& mp, const ExplorationSchedule<Scalar>& sched,
    AffineGamePolicy<Scalar>& policy, CriticParams<Scalar>& critic,
    const RolloutBatch<Scalar>& batch, const TrainConfig& cfg,
    std::size_t iteration) {
  const std::size_t B = batch.paths.size();
  if (B < 2) throw SchemaError("batch must contain >= 2 paths");
  const std::size_t KZ = static_cast<std::size_t>(mp.K);
  const auto pf = detail::psi_factors<Scalar>(mp, sched);

  const CriticFit<Scalar> fit =
      fit_critic<Scalar>(mp, sched, policy, batch, cfg.critic_ridge);
  critic = fit.critic;

  GradientBlocks<Scalar> gb;
  gb.D.assign(KZ, Mat<Scalar>::Zero(mp.m, mp.n + 1));
  gb.E.assign(KZ, Mat<Scalar>::Zero(mp.d, mp.n + 1));
  gb.F.assign(KZ, Mat<Scalar>::Zero(mp.m, mp.n + 1));
  Vec<Scalar> xt(mp.n + 1);
  double s1 = 0.0, s2 = 0.0;
  for (const auto& path : batch.paths) {
    for (std::size_t kz = 0; kz < KZ; ++kz) {
      const StepSample<Scalar>& st = path.steps[kz];
      const Vec<Scalar>& Xn =
          (kz + 1 < KZ) ? path.steps[kz + 1].X : path.X_terminal;
      const Scalar adv =
          st.zeta +
          critic_value<Scalar>(critic, static_cast<index_t>(kz) + 1, Xn) -
          critic_value<Scalar>(critic, static_cast<index_t>(kz), st.X);
      xt.head(mp.n) = st.X;
      xt(mp.n) = Scalar(1);
      gb.D[kz] += (st.score_v * adv) * xt.transpose();
      gb.F[kz] +=
          (st.score_v * adv - pf.psi_inv[kz] * st.eta) * xt.transpose();
      gb.E[kz] += (st.wtil * adv - st.gamma * mp.dt) * xt.transpose();
    }
    s1 += double(path.total);
    s2 += double(path.total) * double(path.total);
  }
  const Scalar Bs = Scalar(B);
  for (std::size_t kz = 0; kz < KZ; ++kz) {
    gb.D[kz] /= Bs;
    gb.E[kz] /= Bs;
    gb.F[kz] /= Bs;
  }
  std::vector<Mat<Scalar>> covs;
  covs.reserve(KZ);
  for (index_t k = 0; k < mp.K; ++k)
    covs.push_back(estimate_state_cov<Scalar>(batch, k, cfg.precond_ridge));
  npg_update<Scalar>(policy, gb, covs, cfg, iteration);

  ActorCriticDiagnostics<Scalar> diag;
  const double N = static_cast<double>(B);
  diag.objective.mean = s1 / N;
  diag.objective.std_error =
      std::sqrt(std::max(0.0, (s2 - s1 * s1 / N) / (N - 1.0)) / N);
  diag.objective.n_paths = B;
  diag.policy_grad_norm = gb.policy_grad_norm();
  diag.tilt_grad_norm = gb.tilt_grad_norm();
  diag.critic_warnings = fit.warnings;
  return diag;
}

}  // namespace rskelly

#endif  // RSKELLY_RL_H
