// Closed-form saddle controls in both characterizations, the Kelly
// portfolio, the reference portfolios (Kelly / benchmark-tracking /
// intertemporal hedging), and the portfolio decompositions built on them.
#ifndef RSKELLY_CONTROLS_H
#define RSKELLY_CONTROLS_H

#include <array>
#include <cmath>
#include <string>

#include "rskelly/model.hpp"
#include "rskelly/riccati.hpp"
#include "rskelly/types.hpp"

namespace rskelly {

// Saddle point of one stage: optimal allocation mean h*, optimal shock
// drift tilt gamma*, optimal exploration-mean tilt eta* (identically zero;
// stored explicitly so callers can assert it).
template <class Scalar>
struct SaddleControls {
  Vec<Scalar> hstar;       // m
  Vec<Scalar> gammastar;   // d
  Vec<Scalar> etastar;     // m, exactly zero
};

namespace detail {

// Shared inputs of the control formulas: symmetrized P_next, the vector
// rho = P_next*(b*dt + Btilde*X) + p_next, and the Gram inverse.
template <class Scalar>
struct ControlInputs {
  Mat<Scalar> Psym;
  Vec<Scalar> rho;
  Mat<Scalar> gram;
  Mat<Scalar> gram_inv;
  Vec<Scalar> drift;  // a + A X
};

template <class Scalar>
ControlInputs<Scalar> control_inputs(const MarketParams<Scalar>& mp,
                                     const Vec<Scalar>& X,
                                     const Mat<Scalar>& P_next,
                                     const Vec<Scalar>& p_next) {
  if (X.size() != mp.n) throw SchemaError("X must have length n");
  if (P_next.rows() != mp.n || P_next.cols() != mp.n)
    throw SchemaError("P_next must be n x n");
  if (p_next.size() != mp.n) throw SchemaError("p_next must have length n");
  ControlInputs<Scalar> ci;
  ci.Psym = symmetrized<Scalar>(P_next);
  const Mat<Scalar> Btilde =
      Mat<Scalar>::Identity(mp.n, mp.n) + mp.Bmat * mp.dt;
  ci.rho = ci.Psym * (mp.b * mp.dt + Btilde * X) + p_next;
  ci.gram = mp.Sigma * mp.Sigma.transpose();
  ci.gram_inv = solve_linear<Scalar>(ci.gram,
                                     Mat<Scalar>::Identity(mp.m, mp.m),
                                     "Sigma Sigma'");
  ci.drift = mp.a + mp.A * X;
  return ci;
}

}  // namespace detail

// ====================== primary characterization ==========================

// Saddle controls in the calB^{-1} form:
//   gamma* = calB^{-1} [ -theta*Sigma'(SigmaSigma')^{-1}(a+AX)
//                        + Lambda'rho + theta*Xi ]
//   h*     = (SigmaSigma')^{-1} [ (I - theta*Sigma calB^{-1} Sigma'
//            (SigmaSigma')^{-1})(a+AX) + Sigma calB^{-1}(Lambda'rho
//            + theta*Xi) ]
//   eta*   = 0
// Gated on the curvature condition -calA > 0 (which makes calB > 0).
template <class Scalar>
SaddleControls<Scalar> optimal_controls_primary(const MarketParams<Scalar>& mp,
                                                index_t k,
                                                const Vec<Scalar>& X,
                                                const Mat<Scalar>& P_next,
                                                const Vec<Scalar>& p_next) {
  const auto ci = detail::control_inputs<Scalar>(mp, X, P_next, p_next);
  const Mat<Scalar> calA =
      mp.Lambda.transpose() * ci.Psym * mp.Lambda * mp.dt -
      Mat<Scalar>::Identity(mp.d, mp.d);
  if (spd_margin<Scalar>(Mat<Scalar>(-calA)) <= Scalar(0))
    throw ConditionError("saddle condition failed (curvature_blockA)", k);
  const Mat<Scalar> calB =
      mp.theta * mp.Sigma.transpose() * ci.gram_inv * mp.Sigma - calA;
  Eigen::LLT<Mat<Scalar>> llt(calB);
  if (llt.info() != Eigen::Success)
    throw NumericalError("stage objective degenerate (ℬ not invertible)");

  const Vec<Scalar> forcing = mp.Lambda.transpose() * ci.rho +
                              mp.theta * mp.Xi;
  SaddleControls<Scalar> sc;
  sc.gammastar = llt.solve(
      Vec<Scalar>(-mp.theta * mp.Sigma.transpose() * ci.gram_inv * ci.drift +
                  forcing));
  const Vec<Scalar> calBinv_sgd = llt.solve(
      Vec<Scalar>(mp.Sigma.transpose() * ci.gram_inv * ci.drift));
  const Vec<Scalar> calBinv_forcing = llt.solve(forcing);
  sc.hstar = ci.gram_inv *
             Vec<Scalar>(ci.drift - mp.theta * mp.Sigma * calBinv_sgd +
                         mp.Sigma * calBinv_forcing);
  sc.etastar = Vec<Scalar>::Zero(mp.m);
  return sc;
}

// ==================== alternative characterization ========================

// Saddle controls in the calC^{-1} form, with s = theta*Xi + Lambda'rho:
//   h*     = (1/(theta+1)) * calC^{-1} [ (a+AX) - Sigma calA^{-1} s ]
//   gamma* = calA^{-1} ( theta*Sigma'h* - s )
//   eta*   = 0
template <class Scalar>
SaddleControls<Scalar> optimal_controls_alt(const MarketParams<Scalar>& mp,
                                            index_t k, const Vec<Scalar>& X,
                                            const Mat<Scalar>& P_next,
                                            const Vec<Scalar>& p_next) {
  const auto ci = detail::control_inputs<Scalar>(mp, X, P_next, p_next);
  const HelperMatrices<Scalar> hm = helper_matrices<Scalar>(mp, ci.Psym);
  if (spd_margin<Scalar>(hm.calC) <= Scalar(0))
    throw ConditionError("saddle condition failed (𝒞 not positive definite)",
                         k);
  const Vec<Scalar> s = mp.theta * mp.Xi + mp.Lambda.transpose() * ci.rho;
  Eigen::FullPivLU<Mat<Scalar>> luA(hm.calA);
  const Vec<Scalar> calAinv_s = luA.solve(s);
  SaddleControls<Scalar> sc;
  sc.hstar = (Scalar(1) / (mp.theta + Scalar(1))) *
             solve_linear<Scalar>(hm.calC,
                                  Mat<Scalar>(ci.drift - mp.Sigma * calAinv_s),
                                  "𝒞");
  sc.gammastar =
      luA.solve(Vec<Scalar>(mp.theta * mp.Sigma.transpose() * sc.hstar - s));
  sc.etastar = Vec<Scalar>::Zero(mp.m);
  return sc;
}

// ========================= Kelly and references ===========================

// Log-utility optimal allocation (SigmaSigma')^{-1}(a + AX).
template <class Scalar>
Vec<Scalar> kelly_control(const MarketParams<Scalar>& mp,
                          const Vec<Scalar>& X) {
  if (X.size() != mp.n) throw SchemaError("X must have length n");
  const Mat<Scalar> gram = mp.Sigma * mp.Sigma.transpose();
  return solve_linear<Scalar>(gram, Mat<Scalar>(mp.a + mp.A * X),
                              "Sigma Sigma'");
}

template <class Scalar>
struct ReferencePortfolios {
  Vec<Scalar> h_kelly;  // (SigmaSigma')^{-1}(a + AX)
  Vec<Scalar> h_bench;  // (SigmaSigma')^{-1} Sigma Xi, minimal tracking
  Vec<Scalar> h_ihp;    // (SigmaSigma')^{-1} Sigma Lambda' rho, hedging
};

template <class Scalar>
ReferencePortfolios<Scalar> reference_portfolios(const MarketParams<Scalar>& mp,
                                                 index_t /*k*/,
                                                 const Vec<Scalar>& X,
                                                 const Mat<Scalar>& P_next,
                                                 const Vec<Scalar>& p_next) {
  const auto ci = detail::control_inputs<Scalar>(mp, X, P_next, p_next);
  ReferencePortfolios<Scalar> rp;
  rp.h_kelly = ci.gram_inv * ci.drift;
  rp.h_bench = ci.gram_inv * (mp.Sigma * mp.Xi);
  rp.h_ihp = ci.gram_inv * (mp.Sigma * (mp.Lambda.transpose() * ci.rho));
  return rp;
}

// =========================== decompositions ===============================

enum class DecompositionVariant { rotated_I, rotated_II, penalized };

// Three-component portfolio decomposition. The saddle allocation is
// recovered as
//   h* = mix_weights[0]*kelly_component + mix_weights[1]*bench_component
//        + mix_weights[2]*ihp_component;
// the rotated variants use weights (1/(theta+1), theta/(theta+1),
// theta/(theta+1)), the penalized variant uses (1, 1, 1) with components
// (Kelly, tilt adjustment, 0).
template <class Scalar>
struct FksDecomposition {
  Vec<Scalar> kelly_component;
  Vec<Scalar> bench_component;
  Vec<Scalar> ihp_component;
  std::array<Scalar, 3> mix_weights{};
  DecompositionVariant variant = DecompositionVariant::penalized;
  Scalar recombination_residual = Scalar(0);  // relative, vs the saddle h*
  bool fallback_theta_zero = false;  // rotated_II requested at theta = 0

  Vec<Scalar> recombined() const {
    return mix_weights[0] * kelly_component +
           mix_weights[1] * bench_component + mix_weights[2] * ihp_component;
  }
};

// h* = h^Kelly + (SigmaSigma')^{-1} Sigma gamma*: the saddle allocation is
// the Kelly portfolio plus the tilt-induced adjustment.
template <class Scalar>
FksDecomposition<Scalar> decompose_penalized_kelly(
    const MarketParams<Scalar>& mp, const SaddleControls<Scalar>& saddle,
    const Vec<Scalar>& X) {
  if (saddle.hstar.size() != mp.m || saddle.gammastar.size() != mp.d)
    throw SchemaError("saddle control dimension mismatch");
  const Mat<Scalar> gram = mp.Sigma * mp.Sigma.transpose();
  FksDecomposition<Scalar> dec;
  dec.variant = DecompositionVariant::penalized;
  dec.kelly_component = kelly_control<Scalar>(mp, X);
  dec.bench_component = solve_linear<Scalar>(
      gram, Mat<Scalar>(mp.Sigma * saddle.gammastar), "Sigma Sigma'");
  dec.ihp_component = Vec<Scalar>::Zero(mp.m);
  dec.mix_weights = {Scalar(1), Scalar(1), Scalar(1)};
  const Scalar resid = (dec.recombined() - saddle.hstar).norm() /
                       (Scalar(1) + saddle.hstar.norm());
  dec.recombination_residual = resid;
  if (resid > Scalar(1e-8)) throw SchemaError("inconsistent saddle inputs");
  return dec;
}

// Rotated/rescaled three-fund decomposition, first form: tilted funds
//   kelly ~ calC^{-1}(a+AX),   bench ~ -calC^{-1} Sigma calA^{-1} Xi,
//   ihp   ~ -(1/theta) calC^{-1} Sigma calA^{-1} Lambda'rho
// with weights (1/(theta+1), theta/(theta+1), theta/(theta+1)). At
// P_next = 0 (calA = -I, calC = SigmaSigma') these reduce to the constant
// -mix funds. At theta = 0 the ihp weight is zero and its fund is reported
// as zero; the recombination target is then the Kelly control.
template <class Scalar>
FksDecomposition<Scalar> decompose_fks_I(const MarketParams<Scalar>& mp,
                                         index_t k, const Vec<Scalar>& X,
                                         const Mat<Scalar>& P_next,
                                         const Vec<Scalar>& p_next) {
  const auto ci = detail::control_inputs<Scalar>(mp, X, P_next, p_next);
  const HelperMatrices<Scalar> hm = helper_matrices<Scalar>(mp, ci.Psym);
  if (spd_margin<Scalar>(hm.calC) <= Scalar(0))
    throw ConditionError("saddle condition failed (𝒞 not positive definite)",
                         k);
  Eigen::FullPivLU<Mat<Scalar>> luA(hm.calA);
  Eigen::FullPivLU<Mat<Scalar>> luC(hm.calC);

  FksDecomposition<Scalar> dec;
  dec.variant = DecompositionVariant::rotated_I;
  dec.kelly_component = luC.solve(ci.drift);
  dec.bench_component =
      -luC.solve(Vec<Scalar>(mp.Sigma * luA.solve(mp.Xi)));
  const Vec<Scalar> lam_rho = mp.Lambda.transpose() * ci.rho;
  if (mp.theta > Scalar(0)) {
    dec.ihp_component =
        -(Scalar(1) / mp.theta) *
        luC.solve(Vec<Scalar>(mp.Sigma * luA.solve(lam_rho)));
  } else {
    dec.ihp_component = Vec<Scalar>::Zero(mp.m);
  }
  const Scalar w = Scalar(1) / (mp.theta + Scalar(1));
  dec.mix_weights = {w, mp.theta * w, mp.theta * w};

  const Vec<Scalar> target =
      mp.theta > Scalar(0)
          ? optimal_controls_alt<Scalar>(mp, k, X, P_next, p_next).hstar
          : kelly_control<Scalar>(mp, X);
  dec.recombination_residual =
      (dec.recombined() - target).norm() / (Scalar(1) + target.norm());
  return dec;
}

// Rotated/rescaled three-fund decomposition, second form: funds expressed
// through calB^{-1},
//   kelly = (theta+1)[I - theta (SigmaSigma')^{-1} Sigma calB^{-1} Sigma']
//           h^Kelly
//   bench = (theta+1)(SigmaSigma')^{-1} Sigma calB^{-1} Xi
//   ihp   = ((theta+1)/theta)(SigmaSigma')^{-1} Sigma calB^{-1} Lambda'rho
// same weights. The ihp rescaling is undefined at theta = 0; the penalized
// decomposition is returned instead with fallback_theta_zero set.
template <class Scalar>
FksDecomposition<Scalar> decompose_fks_II(const MarketParams<Scalar>& mp,
                                          index_t k, const Vec<Scalar>& X,
                                          const Mat<Scalar>& P_next,
                                          const Vec<Scalar>& p_next) {
  const SaddleControls<Scalar> saddle =
      optimal_controls_primary<Scalar>(mp, k, X, P_next, p_next);
  if (mp.theta == Scalar(0)) {
    FksDecomposition<Scalar> dec =
        decompose_penalized_kelly<Scalar>(mp, saddle, X);
    dec.fallback_theta_zero = true;
    return dec;
  }
  const auto ci = detail::control_inputs<Scalar>(mp, X, P_next, p_next);
  const Mat<Scalar> calA =
      mp.Lambda.transpose() * ci.Psym * mp.Lambda * mp.dt -
      Mat<Scalar>::Identity(mp.d, mp.d);
  const Mat<Scalar> calB =
      mp.theta * mp.Sigma.transpose() * ci.gram_inv * mp.Sigma - calA;
  Eigen::FullPivLU<Mat<Scalar>> luB(calB);
  if (!luB.isInvertible())
    throw NumericalError("stage objective degenerate (ℬ not invertible)");

  const Vec<Scalar> h_kelly = ci.gram_inv * ci.drift;
  const Scalar tp1 = mp.theta + Scalar(1);
  FksDecomposition<Scalar> dec;
  dec.variant = DecompositionVariant::rotated_II;
  dec.kelly_component =
      tp1 * (h_kelly - mp.theta * ci.gram_inv *
                           (mp.Sigma * luB.solve(
                                           Vec<Scalar>(mp.Sigma.transpose() *
                                                       h_kelly))));
  dec.bench_component = tp1 * ci.gram_inv * (mp.Sigma * luB.solve(mp.Xi));
  dec.ihp_component =
      (tp1 / mp.theta) * ci.gram_inv *
      (mp.Sigma * luB.solve(Vec<Scalar>(mp.Lambda.transpose() * ci.rho)));
  const Scalar w = Scalar(1) / tp1;
  dec.mix_weights = {w, mp.theta * w, mp.theta * w};
  dec.recombination_residual = (dec.recombined() - saddle.hstar).norm() /
                               (Scalar(1) + saddle.hstar.norm());
  return dec;
}

}  // namespace rskelly

#endif  // RSKELLY_CONTROLS_H
