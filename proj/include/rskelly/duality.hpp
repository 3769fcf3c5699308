// Stage-level game objects: the running reward g of the tilted control
// problem, the expected continuation value, the Hamiltonian and its
// control-dependent part F, KL penalties and log likelihood ratios for
// constant tilts, the inner (tilt-side) best response, and a brute-force
// free-energy/entropy duality oracle on finite support.
#ifndef RSKELLY_DUALITY_H
#define RSKELLY_DUALITY_H

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "rskelly/model.hpp"
#include "rskelly/riccati.hpp"
#include "rskelly/simulator.hpp"
#include "rskelly/types.hpp"

namespace rskelly {

// One stage's controls: the policy mean hbar (m), the shock-drift tilt
// gamma (d), and the exploration-mean tilt eta (m).
template <class Scalar>
struct ControlTriple {
  Vec<Scalar> hbar;
  Vec<Scalar> gamma;
  Vec<Scalar> eta;

  static ControlTriple zero(index_t m, index_t d) {
    return {Vec<Scalar>::Zero(m), Vec<Scalar>::Zero(d), Vec<Scalar>::Zero(m)};
  }
};

// Everything one stage evaluation needs: the step index, the state, the
// continuation coefficients (already solved for step k+1), and the step's
// exploration covariance.
template <class Scalar>
struct StepContext {
  index_t k = 0;
  Vec<Scalar> X;
  Mat<Scalar> P_next;
  Vec<Scalar> p_next;
  Scalar r_next = Scalar(0);
  Mat<Scalar> psi_k;
};

// ========================== running reward g ==============================

// Stage reward of the tilted game (per unit time, pre-multiplication by
// theta*dt). Undefined at theta = 0, where the criterion degenerates to the
// Kelly problem.
template <class Scalar>
Scalar running_reward_g(const MarketParams<Scalar>& mp,
                        const Mat<Scalar>& psi_k, const Vec<Scalar>& X,
                        const Vec<Scalar>& hbar, const Vec<Scalar>& eta,
                        const Vec<Scalar>& gamma) {
  if (mp.theta <= Scalar(0))
    throw SchemaError("g undefined at θ=0; use Kelly mode");
  if (hbar.size() != mp.m || eta.size() != mp.m || gamma.size() != mp.d ||
      X.size() != mp.n)
    throw SchemaError("control/state dimension mismatch");
  const Mat<Scalar> gram = mp.Sigma * mp.Sigma.transpose();
  const Vec<Scalar> z = hbar + eta;
  const Vec<Scalar> psi_inv_eta = solve_linear<Scalar>(
      psi_k, Mat<Scalar>(eta), "Psi_k");
  return Scalar(0.5) * z.dot(gram * z) +
         Scalar(0.5) * (psi_k * gram).trace() - z.dot(mp.a) -
         Scalar(0.5) * mp.Xi.squaredNorm() + mp.c -
         (mp.A.transpose() * z - mp.Cvec).dot(X) -
         (mp.Sigma.transpose() * z - mp.Xi).dot(gamma) -
         gamma.squaredNorm() / (Scalar(2) * mp.theta) -
         eta.dot(psi_inv_eta) / (Scalar(2) * mp.theta * mp.dt);
}

// ======================= continuation and Hamiltonian =====================

// E[u_{k+1}(X_{k+1})] under the tilted transition from ctx.X with tilt
// gamma: the next state is mu + Lambda*(noise), mu = b*dt + Btilde*X +
// Lambda*gamma*dt, noise covariance dt*I.
template <class Scalar>
Scalar expected_continuation(const MarketParams<Scalar>& mp,
                             const StepContext<Scalar>& ctx,
                             const Vec<Scalar>& gamma) {
  const Mat<Scalar> Psym =
      Scalar(0.5) * (ctx.P_next + ctx.P_next.transpose());
  const Mat<Scalar> Btilde =
      Mat<Scalar>::Identity(mp.n, mp.n) + mp.Bmat * mp.dt;
  const Vec<Scalar> mu =
      mp.b * mp.dt + Btilde * ctx.X + mp.Lambda * gamma * mp.dt;
  return Scalar(0.5) * mu.dot(Psym * mu) +
         Scalar(0.5) * (mp.Lambda.transpose() * Psym * mp.Lambda).trace() *
             mp.dt +
         mu.dot(ctx.p_next) + ctx.r_next;
}

// Stage Hamiltonian: theta * g * dt plus the expected continuation.
template <class Scalar>
Scalar hamiltonian(const MarketParams<Scalar>& mp,
                   const StepContext<Scalar>& ctx,
                   const ControlTriple<Scalar>& u) {
  return mp.theta *
             running_reward_g<Scalar>(mp, ctx.psi_k, ctx.X, u.hbar, u.eta,
                                      u.gamma) *
             mp.dt +
         expected_continuation<Scalar>(mp, ctx, u.gamma);
}

// Control-dependent part of the Hamiltonian: F(0,0,0) = 0 and
// hamiltonian = aux_F + hamiltonian_remainder identically.
template <class Scalar>
Scalar aux_F(const MarketParams<Scalar>& mp, const StepContext<Scalar>& ctx,
             const ControlTriple<Scalar>& u) {
  if (u.hbar.size() != mp.m || u.eta.size() != mp.m ||
      u.gamma.size() != mp.d || ctx.X.size() != mp.n)
    throw SchemaError("control/state dimension mismatch");
  const Mat<Scalar> gram = mp.Sigma * mp.Sigma.transpose();
  const Mat<Scalar> Psym =
      Scalar(0.5) * (ctx.P_next + ctx.P_next.transpose());
  const Mat<Scalar> Btilde =
      Mat<Scalar>::Identity(mp.n, mp.n) + mp.Bmat * mp.dt;
  const Mat<Scalar> calA = mp.Lambda.transpose() * Psym * mp.Lambda * mp.dt -
                           Mat<Scalar>::Identity(mp.d, mp.d);
  const Vec<Scalar> z = u.hbar + u.eta;
  const Vec<Scalar> rho = Psym * (mp.b * mp.dt + Btilde * ctx.X) + ctx.p_next;
  const Vec<Scalar> psi_inv_eta = solve_linear<Scalar>(
      ctx.psi_k, Mat<Scalar>(u.eta), "Psi_k");
  return Scalar(0.5) * mp.theta * z.dot(gram * z) * mp.dt -
         mp.theta * z.dot(mp.a + mp.A * ctx.X) * mp.dt -
         mp.theta * (mp.Sigma.transpose() * z - mp.Xi).dot(u.gamma) * mp.dt +
         Scalar(0.5) * u.gamma.dot(calA * u.gamma) * mp.dt +
         u.gamma.dot(mp.Lambda.transpose() * rho) * mp.dt -
         Scalar(0.5) * u.eta.dot(psi_inv_eta);
}

// State-only remainder: hamiltonian(mp, ctx, u) - aux_F(mp, ctx, u) for
// every control triple u.
template <class Scalar>
Scalar hamiltonian_remainder(const MarketParams<Scalar>& mp,
                             const StepContext<Scalar>& ctx) {
  const Mat<Scalar> gram = mp.Sigma * mp.Sigma.transpose();
  const Mat<Scalar> Psym =
      Scalar(0.5) * (ctx.P_next + ctx.P_next.transpose());
  const Mat<Scalar> Btilde =
      Mat<Scalar>::Identity(mp.n, mp.n) + mp.Bmat * mp.dt;
  const Vec<Scalar> mu0 = mp.b * mp.dt + Btilde * ctx.X;
  return Scalar(0.5) * mu0.dot(Psym * mu0) + mu0.dot(ctx.p_next) +
         mp.theta * (mp.c + mp.Cvec.dot(ctx.X)) * mp.dt +
         Scalar(0.5) * mp.theta * (ctx.psi_k * gram).trace() * mp.dt -
         Scalar(0.5) * mp.theta * mp.Xi.squaredNorm() * mp.dt +
         Scalar(0.5) * (mp.Lambda.transpose() * Psym * mp.Lambda).trace() *
             mp.dt +
         ctx.r_next;
}

// ======================== KL and likelihood ratio =========================

// Total relative entropy of the tilted measure for deterministic per-step
// tilt sequences: 0.5 * sum_k ( |gamma_k|^2 dt + eta_k' inv(Psi_k) eta_k ).
template <class Scalar>
Scalar kl_penalty(const std::vector<Vec<Scalar>>& gamma_seq,
                  const std::vector<Vec<Scalar>>& eta_seq,
                  const ExplorationSchedule<Scalar>& sched, Scalar dt) {
  if (gamma_seq.size() != eta_seq.size() ||
      gamma_seq.size() != sched.psi.size())
    throw SchemaError("tilt sequence length mismatch");
  Scalar kl = Scalar(0);
  for (std::size_t k = 0; k < gamma_seq.size(); ++k) {
    const Vec<Scalar> psi_inv_eta = solve_linear<Scalar>(
        sched.psi[k], Mat<Scalar>(eta_seq[k]), "Psi_k");
    kl += Scalar(0.5) *
          (gamma_seq[k].squaredNorm() * dt + eta_seq[k].dot(psi_inv_eta));
  }
  return kl;
}

// Log likelihood ratio of the constant-tilt measure against the nominal one,
// evaluated on nominal-measure draws: the factor-shock part contributes
// gamma'w_k - 0.5|gamma|^2 dt and the exploration part eta'inv(Psi)v_k -
// 0.5 eta'inv(Psi)eta, with v_k = chol(Psi_k) v_std_k. Its nominal
// expectation is exactly -kl_penalty of the constant sequences.
template <class Scalar>
Scalar log_likelihood_ratio(const MarketParams<Scalar>& mp,
                            const ExplorationSchedule<Scalar>& sched,
                            const Vec<Scalar>& gamma_const,
                            const Vec<Scalar>& eta_const,
                            const NoiseDraws<Scalar>& noise) {
  if (gamma_const.size() != mp.d || eta_const.size() != mp.m)
    throw SchemaError("tilt dimension mismatch");
  if (noise.w.size() != sched.psi.size())
    throw SchemaError("tilt sequence length mismatch");
  Scalar lr = Scalar(0);
  for (std::size_t k = 0; k < noise.w.size(); ++k) {
    const Vec<Scalar> psi_inv_eta = solve_linear<Scalar>(
        sched.psi[k], Mat<Scalar>(eta_const), "Psi_k");
    Eigen::LLT<Mat<Scalar>> llt(sched.psi[k]);
    if (llt.info() != Eigen::Success)
      throw NumericalError("Psi_k Cholesky failed");
    const Vec<Scalar> v = llt.matrixL() * noise.v_std[k];
    lr += gamma_const.dot(noise.w[k]) -
          Scalar(0.5) * gamma_const.squaredNorm() * mp.dt +
          psi_inv_eta.dot(v) - Scalar(0.5) * eta_const.dot(psi_inv_eta);
  }
  return lr;
}

// ========================== dual best response ============================

// Joint maximizing tilt (gamma, eta) of the Hamiltonian for a fixed hbar,
// from the two first-order conditions:
//   calA*gamma - theta*Sigma'*eta               = theta*Sigma'hbar - theta*Xi - Lambda'rho
//   -theta*Sigma*dt*gamma
//     + (theta*SigmaSigma'*dt - inv(Psi))*eta   = theta*dt*(a + A*X - SigmaSigma'*hbar)
// Valid (an interior maximum) when the joint curvature conditions hold.
template <class Scalar>
std::pair<Vec<Scalar>, Vec<Scalar>> dual_best_response(
    const MarketParams<Scalar>& mp, const StepContext<Scalar>& ctx,
    const Vec<Scalar>& hbar) {
  const Mat<Scalar> gram = mp.Sigma * mp.Sigma.transpose();
  const Mat<Scalar> Psym =
      Scalar(0.5) * (ctx.P_next + ctx.P_next.transpose());
  const Mat<Scalar> Btilde =
      Mat<Scalar>::Identity(mp.n, mp.n) + mp.Bmat * mp.dt;
  const Mat<Scalar> calA = mp.Lambda.transpose() * Psym * mp.Lambda * mp.dt -
                           Mat<Scalar>::Identity(mp.d, mp.d);
  const Mat<Scalar> psi_inv = solve_linear<Scalar>(
      ctx.psi_k, Mat<Scalar>::Identity(mp.m, mp.m), "Psi_k");
  const Vec<Scalar> rho = Psym * (mp.b * mp.dt + Btilde * ctx.X) + ctx.p_next;

  Mat<Scalar> M = Mat<Scalar>::Zero(mp.d + mp.m, mp.d + mp.m);
  M.topLeftCorner(mp.d, mp.d) = calA;
  M.topRightCorner(mp.d, mp.m) = -mp.theta * mp.Sigma.transpose();
  M.bottomLeftCorner(mp.m, mp.d) = -mp.theta * mp.Sigma * mp.dt;
  M.bottomRightCorner(mp.m, mp.m) = mp.theta * gram * mp.dt - psi_inv;

  Vec<Scalar> rhs(mp.d + mp.m);
  rhs.head(mp.d) =
      mp.theta * mp.Sigma.transpose() * hbar - mp.theta * mp.Xi -
      mp.Lambda.transpose() * rho;
  rhs.tail(mp.m) =
      mp.theta * mp.dt * (mp.a + mp.A * ctx.X - gram * hbar);

  const Vec<Scalar> sol =
      solve_linear<Scalar>(M, Mat<Scalar>(rhs), "tilt best response");
  return {sol.head(mp.d), sol.tail(mp.m)};
}

// ===================== finite-support duality oracle ======================

// Free energy ln E[e^psi] of a finite-support random variable, computed in
// log-sum-exp form. Weights must be strictly positive and sum to one.
template <class Scalar>
Scalar free_energy(const std::vector<Scalar>& psi_atoms,
                   const std::vector<Scalar>& q_weights) {
  if (psi_atoms.empty() || psi_atoms.size() != q_weights.size())
    throw SchemaError("empty support");
  Scalar wsum = Scalar(0);
  for (Scalar q : q_weights) {
    if (q <= Scalar(0)) throw SchemaError("empty support");
    wsum += q;
  }
  if (std::abs(double(wsum - Scalar(1))) > 1e-9)
    throw SchemaError("weights must sum to 1");
  Scalar mx = -std::numeric_limits<Scalar>::infinity();
  for (Scalar p : psi_atoms) mx = std::max(mx, p);
  Scalar acc = Scalar(0);
  for (std::size_t i = 0; i < psi_atoms.size(); ++i)
    acc += q_weights[i] * std::exp(psi_atoms[i] - mx);
  return mx + std::log(acc);
}

template <class Scalar>
struct DualityReport {
  Scalar free_energy = Scalar(0);
  Scalar best_dual_value = Scalar(0);
  Scalar gap = Scalar(0);  // free_energy - best_dual_value, >= 0
  std::vector<Scalar> argmax_tilt;     // best p found on the grid
  std::vector<Scalar> reference_tilt;  // closed form q_i e^{psi_i}/E[e^psi]
  Scalar max_atom_discrepancy = Scalar(0);
};

struct DualityGridOptions {
  int points_per_dim = 13;
  int stages = 32;
  double shrink = 0.6;  // box halfwidth factor per stage; 0.6*hw covers
                        // +-3.6 grid cells around the incumbent, a safe
                        // margin for strongly concave objectives
};

// Brute-force verification of the variational identity
//   ln E_q[e^psi] = sup_p { E_p[psi] - KL(p||q) }
// over measures p on the same atoms: nested grid refinement on the first
// N-1 simplex coordinates around the incumbent, keeping the best value seen
// (so the reported gap is monotone under refinement). Ties on the grid are
// broken lexicographically on the tilt vector for determinism.
template <class Scalar>
DualityReport<Scalar> duality_brute_force(
    const std::vector<Scalar>& psi_atoms, const std::vector<Scalar>& q_weights,
    const DualityGridOptions& opt = {}) {
  DualityReport<Scalar> rep;
  rep.free_energy = free_energy<Scalar>(psi_atoms, q_weights);
  const std::size_t N = psi_atoms.size();

  rep.reference_tilt.resize(N);
  {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Scalar p : psi_atoms) mx = std::max(mx, p);
    Scalar z = Scalar(0);
    for (std::size_t i = 0; i < N; ++i)
      z += q_weights[i] * std::exp(psi_atoms[i] - mx);
    for (std::size_t i = 0; i < N; ++i)
      rep.reference_tilt[i] = q_weights[i] * std::exp(psi_atoms[i] - mx) / z;
  }

  const auto objective = [&](const std::vector<Scalar>& p) {
    Scalar val = Scalar(0);
    for (std::size_t i = 0; i < N; ++i) {
      if (p[i] < Scalar(0)) return -std::numeric_limits<Scalar>::infinity();
      val += p[i] * psi_atoms[i];
      if (p[i] > Scalar(0))
        val -= p[i] * std::log(p[i] / q_weights[i]);
    }
    return val;
  };

  // Incumbent: the base measure itself (feasible, closed-form-independent).
  std::vector<Scalar> best_p(q_weights);
  Scalar best_val = objective(best_p);

  if (N == 1) {
    rep.best_dual_value = best_val;
    rep.argmax_tilt = best_p;
    rep.gap = rep.free_energy - best_val;
    rep.max_atom_discrepancy = Scalar(0);
    return rep;
  }

  const std::size_t free_dims = N - 1;
  const int g = std::max(3, opt.points_per_dim);
  std::vector<Scalar> center(best_p.begin(), best_p.begin() + free_dims);
  Scalar halfwidth = Scalar(1);

  std::vector<int> idx(free_dims, 0);
  std::vector<Scalar> p(N);
  for (int stage = 0; stage < opt.stages; ++stage) {
    const Scalar step = Scalar(2) * halfwidth / Scalar(g - 1);
    std::fill(idx.begin(), idx.end(), 0);
    bool done = false;
    std::vector<Scalar> stage_best_center = center;
    while (!done) {
      Scalar tail = Scalar(1);
      bool feasible = true;
      for (std::size_t j = 0; j < free_dims; ++j) {
        Scalar pj = center[j] - halfwidth + Scalar(idx[j]) * step;
        pj = std::min(std::max(pj, Scalar(0)), Scalar(1));
        p[j] = pj;
        tail -= pj;
        if (tail < Scalar(0)) { feasible = false; }
      }
      if (feasible) {
        p[free_dims] = tail;
        const Scalar val = objective(p);
        const bool better =
            val > best_val ||
            (val == best_val &&
             std::lexicographical_compare(p.begin(), p.end(),
                                          best_p.begin(), best_p.end()));
        if (better) {
          best_val = val;
          best_p = p;
          stage_best_center.assign(p.begin(), p.begin() + free_dims);
        }
      }
      // odometer increment over the grid
      std::size_t j = 0;
      while (j < free_dims && ++idx[j] == g) { idx[j] = 0; ++j; }
      done = (j == free_dims);
    }
    center = stage_best_center;
    halfwidth *= Scalar(opt.shrink);
  }

  rep.best_dual_value = best_val;
  rep.argmax_tilt = best_p;
  rep.gap = rep.free_energy - best_val;
  rep.max_atom_discrepancy = Scalar(0);
  for (std::size_t i = 0; i < N; ++i)
    rep.max_atom_discrepancy =
        std::max(rep.max_atom_discrepancy,
                 Scalar(std::abs(double(best_p[i] - rep.reference_tilt[i]))));
  return rep;
}

}  // namespace rskelly

#endif  // RSKELLY_DUALITY_H
