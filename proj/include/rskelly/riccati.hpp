// Backward solver for the quadratic value coefficients (P_k, p_k, r_k) of
// the risk-sensitive benchmarked allocation game, the helper matrices used
// by the saddle-point formulas, the quadratic coefficients of the optimized
// stage objective, and the saddle-existence condition checkers.
//
// The value at step k is u_k(X) = 0.5*X'P_k X + X'p_k + r_k with terminal
// triple (0, 0, 0); one backward step optimizes the stage objective in
// closed form and adds the state-propagation terms. theta is the risk
// sensitivity; theta = 0 degenerates the game (the Kelly route) and is
// accepted by step_back for testing only, while solve requires theta > 0.
#ifndef RSKELLY_RICCATI_H
#define RSKELLY_RICCATI_H

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "rskelly/model.hpp"
#include "rskelly/types.hpp"

namespace rskelly {

// =============================== types ====================================

// Value coefficients over the full horizon: index k = 0..K.
template <class Scalar>
struct QuadraticValue {
  std::vector<Mat<Scalar>> P;  // K+1 symmetric n x n
  std::vector<Vec<Scalar>> p;  // K+1 n-vectors
  std::vector<Scalar> r;       // K+1 scalars
  index_t K() const { return static_cast<index_t>(r.size()) - 1; }
};

// Helper matrices for one backward step, all built from P_{k+1}:
//   calA = Lambda'P_{k+1}Lambda*dt - I_d          (curvature of the drift tilt)
//   calB = theta*Sigma'(SigmaSigma')^{-1}Sigma - calA
//   calC = (1/(theta+1))*Sigma*(I_d - theta*calA^{-1})*Sigma'
template <class Scalar>
struct HelperMatrices {
  Mat<Scalar> calA;  // d x d
  Mat<Scalar> calB;  // d x d
  Mat<Scalar> calC;  // m x m
};

// One positive-definiteness check: pass/fail plus the smallest eigenvalue of
// the matrix that must be positive definite.
struct ConditionBlock {
  bool pass = false;
  double margin = std::numeric_limits<double>::quiet_NaN();
};

// Both sufficient-condition sets for saddle existence at one step.
//   curvature_blockA : -calA > 0, i.e. every eigenvalue of
//                        Lambda'P_{k+1}Lambda*dt is < 1
//   curvature_blockB : inv(Psi_k) - theta*SigmaSigma'*dt > 0
//   riskresist_C       : calC > 0
//   riskresist_eta     : inv(Psi_k) - theta*Sigma(I - theta*calA^{-1})Sigma'*dt > 0
// equivalence_flag records whether the two sets reach the same verdict for
// this instance. (The second set is the exact concavity condition of the
// joint tilt problem; instances exist where blockB passes but riskresist_eta
// fails — see the unit tests — so the flag is reported, not assumed.)
struct ConditionReport {
  ConditionBlock curvature_blockA;
  ConditionBlock curvature_blockB;
  ConditionBlock riskresist_C;
  ConditionBlock riskresist_eta;
  bool equivalence_flag = false;

  bool curvature_pass() const {
    return curvature_blockA.pass && curvature_blockB.pass;
  }
  bool riskresist_pass() const {
    return riskresist_C.pass && riskresist_eta.pass;
  }
};

// Condition failure during a backward sweep; carries the step index and the
// full report for diagnosis.
class SaddleConditionError : public ConditionError {
public:
  SaddleConditionError(const std::string& what, index_t step,
                       ConditionReport report)
      : ConditionError(what, step), report_(std::move(report)) {}
  const ConditionReport& report() const { return report_; }

private:
  ConditionReport report_;
};

// ============================ helper matrices ==============================

namespace detail {

template <class Scalar>
Mat<Scalar> symmetrized(const Mat<Scalar>& M) {
  return Scalar(0.5) * (M + M.transpose());
}

// Inverse of the symmetric matrix calA via eigendecomposition, with a
// relative singularity threshold.
template <class Scalar>
Mat<Scalar> invert_calA(const Mat<Scalar>& calA) {
  Eigen::SelfAdjointEigenSolver<Mat<Scalar>> es(calA);
  if (es.info() != Eigen::Success)
    throw NumericalError("eigendecomposition of 𝒜 failed");
  const Vec<Scalar>& ev = es.eigenvalues();
  const Scalar scale = std::max(Scalar(1), ev.cwiseAbs().maxCoeff());
  if ((ev.cwiseAbs().array() <= Scalar(1e-12) * scale).any())
    throw NumericalError("curvature condition violated (𝒜 not invertible)");
  return es.eigenvectors() * ev.cwiseInverse().asDiagonal() *
         es.eigenvectors().transpose();
}

}  // namespace detail

template <class Scalar>
HelperMatrices<Scalar> helper_matrices(const MarketParams<Scalar>& mp,
                                       const Mat<Scalar>& P_next) {
  if (P_next.rows() != mp.n || P_next.cols() != mp.n)
    throw SchemaError("P_next must be n x n");
  const Mat<Scalar> Psym = detail::symmetrized<Scalar>(P_next);
  const DerivedConstants<Scalar> dc = derive_constants(mp);
  HelperMatrices<Scalar> h;
  h.calA = mp.Lambda.transpose() * Psym * mp.Lambda * mp.dt -
           Mat<Scalar>::Identity(mp.d, mp.d);
  h.calB = mp.theta * mp.Sigma.transpose() * dc.SigmaGramInv * mp.Sigma - h.calA;
  const Mat<Scalar> calA_inv = detail::invert_calA<Scalar>(h.calA);
  h.calC = (Scalar(1) / (mp.theta + Scalar(1))) * mp.Sigma *
           (Mat<Scalar>::Identity(mp.d, mp.d) - mp.theta * calA_inv) *
           mp.Sigma.transpose();
  return h;
}

// =========================== condition checks =============================

// Evaluate both sufficient-condition sets at one step (reporting only;
// nothing is thrown on failure).
template <class Scalar>
ConditionReport check_saddle_conditions(const MarketParams<Scalar>& mp,
                                        const Mat<Scalar>& P_next,
                                        const Mat<Scalar>& psi_k) {
  if (psi_k.rows() != mp.m || psi_k.cols() != mp.m)
    throw SchemaError("Psi_k must be m x m");
  if (!is_spd<Scalar>(psi_k))
    throw SchemaError("exploration covariance not SPD");
  const Mat<Scalar> Psym = detail::symmetrized<Scalar>(P_next);
  const Mat<Scalar> gram = mp.Sigma * mp.Sigma.transpose();
  const Mat<Scalar> psi_inv = solve_linear<Scalar>(
      psi_k, Mat<Scalar>::Identity(mp.m, mp.m), "Psi_k");

  ConditionReport rep;
  const Mat<Scalar> calA = mp.Lambda.transpose() * Psym * mp.Lambda * mp.dt -
                           Mat<Scalar>::Identity(mp.d, mp.d);
  rep.curvature_blockA.margin = double(spd_margin<Scalar>(Mat<Scalar>(-calA)));
  rep.curvature_blockA.pass = rep.curvature_blockA.margin > 0.0;

  rep.curvature_blockB.margin =
      double(spd_margin<Scalar>(Mat<Scalar>(psi_inv - mp.theta * gram * mp.dt)));
  rep.curvature_blockB.pass = rep.curvature_blockB.margin > 0.0;

  try {
    const Mat<Scalar> calA_inv = detail::invert_calA<Scalar>(calA);
    const Mat<Scalar> tilted_gram =
        mp.Sigma *
        (Mat<Scalar>::Identity(mp.d, mp.d) - mp.theta * calA_inv) *
        mp.Sigma.transpose();
    const Mat<Scalar> calC =
        (Scalar(1) / (mp.theta + Scalar(1))) * tilted_gram;
    rep.riskresist_C.margin = double(spd_margin<Scalar>(calC));
    rep.riskresist_C.pass = rep.riskresist_C.margin > 0.0;
    rep.riskresist_eta.margin = double(spd_margin<Scalar>(
        Mat<Scalar>(psi_inv - mp.theta * tilted_gram * mp.dt)));
    rep.riskresist_eta.pass = rep.riskresist_eta.margin > 0.0;
  } catch (const NumericalError&) {
    // calA singular: the exact concavity conditions are unevaluable; both
    // fail with NaN margins (blockA sits at margin 0 in this case).
    rep.riskresist_C.pass = false;
    rep.riskresist_eta.pass = false;
  }
  rep.equivalence_flag = rep.curvature_pass() == rep.riskresist_pass();
  return rep;
}

// =================== optimized stage-objective coefficients ===============

// Quadratic coefficients of the optimized stage objective as a function of
// the state: F*(X) = 0.5*X'Qfrak*X + X'qfrak + lfrak. The backward value
// recursion is P_k = Qfrak + Btilde'P_{k+1}Btilde plus the lower-order
// analogues.
template <class Scalar>
struct QuadFCoeffs {
  Mat<Scalar> Qfrak;  // n x n symmetric
  Vec<Scalar> qfrak;  // n
  Scalar lfrak = Scalar(0);
};

// Feedback coefficients of the optimizing drift tilt: gamma*(X) = Kfrak*X +
// kfrak. Internal diagnostics surfaced for tests; the public control
// formulas live in controls.hpp.
template <class Scalar>
struct GammaFeedback {
  Mat<Scalar> Kfrak;  // d x n
  Vec<Scalar> kfrak;  // d
};

namespace detail {

// Shared assembly for quadF_coeffs / gamma_feedback: the Gram pieces
//   W  = -theta*Sigma'(SigmaSigma')^{-1}A + Lambda'P_next*Btilde      (d x n)
//   kt = -theta*Sigma'(SigmaSigma')^{-1}a + Lambda'P_next*b*dt
//        + Lambda'p_next + theta*Xi                                   (d)
// against which every coefficient is a calB-weighted inner product.
template <class Scalar>
struct StageGram {
  Mat<Scalar> W;
  Vec<Scalar> kt;
  Mat<Scalar> calB_inv_W;   // calB^{-1} W
  Vec<Scalar> calB_inv_kt;  // calB^{-1} kt
  Mat<Scalar> Btilde;
  Mat<Scalar> Psym;
};

template <class Scalar>
StageGram<Scalar> stage_gram(const MarketParams<Scalar>& mp,
                             const Mat<Scalar>& P_next,
                             const Vec<Scalar>& p_next) {
  if (P_next.rows() != mp.n || P_next.cols() != mp.n)
    throw SchemaError("P_next must be n x n");
  if (p_next.size() != mp.n) throw SchemaError("p_next must have length n");
  const DerivedConstants<Scalar> dc = derive_constants(mp);
  StageGram<Scalar> s;
  s.Psym = symmetrized<Scalar>(P_next);
  s.Btilde = dc.Btilde;
  const Mat<Scalar> calA =
      mp.Lambda.transpose() * s.Psym * mp.Lambda * mp.dt -
      Mat<Scalar>::Identity(mp.d, mp.d);
  const Mat<Scalar> calB =
      mp.theta * mp.Sigma.transpose() * dc.SigmaGramInv * mp.Sigma - calA;
  const Mat<Scalar> SginvA = dc.SigmaGramInv * mp.A;  // (SigmaSigma')^{-1} A
  const Vec<Scalar> Sginva = dc.SigmaGramInv * mp.a;
  s.W = -mp.theta * mp.Sigma.transpose() * SginvA +
        mp.Lambda.transpose() * s.Psym * s.Btilde;
  s.kt = -mp.theta * mp.Sigma.transpose() * Sginva +
         mp.Lambda.transpose() * s.Psym * mp.b * mp.dt +
         mp.Lambda.transpose() * p_next + mp.theta * mp.Xi;
  Eigen::FullPivLU<Mat<Scalar>> lu(calB);
  if (!lu.isInvertible())
    throw NumericalError("stage objective degenerate (ℬ not invertible)");
  s.calB_inv_W = lu.solve(s.W);
  s.calB_inv_kt = lu.solve(s.kt);
  return s;
}

}  // namespace detail

template <class Scalar>
QuadFCoeffs<Scalar> quadF_coeffs(const MarketParams<Scalar>& mp,
                                 const Mat<Scalar>& P_next,
                                 const Vec<Scalar>& p_next) {
  const auto s = detail::stage_gram<Scalar>(mp, P_next, p_next);
  const DerivedConstants<Scalar> dc = derive_constants(mp);
  QuadFCoeffs<Scalar> q;
  q.Qfrak = (-mp.theta * mp.A.transpose() * dc.SigmaGramInv * mp.A +
             s.W.transpose() * s.calB_inv_W) *
            mp.dt;
  q.Qfrak = detail::symmetrized<Scalar>(q.Qfrak);
  q.qfrak = (-mp.theta * mp.A.transpose() * dc.SigmaGramInv * mp.a +
             s.W.transpose() * s.calB_inv_kt) *
            mp.dt;
  q.lfrak = (-Scalar(0.5) * mp.theta * mp.a.dot(dc.SigmaGramInv * mp.a) +
             Scalar(0.5) * s.kt.dot(s.calB_inv_kt)) *
            mp.dt;
  return q;
}

// Test-only accessor for the optimizing tilt's feedback coefficients.
template <class Scalar>
GammaFeedback<Scalar> gamma_feedback(const MarketParams<Scalar>& mp,
                                     const Mat<Scalar>& P_next,
                                     const Vec<Scalar>& p_next) {
  const auto s = detail::stage_gram<Scalar>(mp, P_next, p_next);
  return {s.calB_inv_W, s.calB_inv_kt};
}

// ============================ backward step ===============================

// One backward step k+1 -> k. Preconditions: the step's saddle conditions
// pass (checked here; throws SaddleConditionError naming the failed block).
// `step_for_error` only labels the exception when the caller knows k.
template <class Scalar>
void step_back(const MarketParams<Scalar>& mp, const Mat<Scalar>& P_next,
               const Vec<Scalar>& p_next, Scalar r_next,
               const Mat<Scalar>& psi_k, Mat<Scalar>& P_out,
               Vec<Scalar>& p_out, Scalar& r_out,
               index_t step_for_error = -1) {
  const ConditionReport rep =
      check_saddle_conditions<Scalar>(mp, P_next, psi_k);
  if (!rep.curvature_pass()) {
    const char* block = rep.curvature_blockA.pass
                            ? "curvature_blockB"
                            : "curvature_blockA";
    throw SaddleConditionError(
        std::string("saddle condition failed (") + block + ")",
        step_for_error, rep);
  }
  const Mat<Scalar> Psym = detail::symmetrized<Scalar>(P_next);
  const DerivedConstants<Scalar> dc = derive_constants(mp);
  const QuadFCoeffs<Scalar> q = quadF_coeffs<Scalar>(mp, Psym, p_next);
  const Mat<Scalar> gram = mp.Sigma * mp.Sigma.transpose();

  P_out = detail::symmetrized<Scalar>(
      Mat<Scalar>(q.Qfrak + dc.Btilde.transpose() * Psym * dc.Btilde));
  p_out = q.qfrak +
          (dc.Btilde.transpose() * (Psym * mp.b + p_next / mp.dt) +
           mp.theta * mp.Cvec) *
              mp.dt;
  r_out = r_next + q.lfrak +
          (Scalar(0.5) * mp.b.dot(Psym * mp.b) * mp.dt + mp.b.dot(p_next) +
           mp.theta * mp.c +
           Scalar(0.5) * mp.theta * (psi_k * gram).trace() -
           Scalar(0.5) * mp.theta * mp.Xi.squaredNorm() +
           Scalar(0.5) * (mp.Lambda.transpose() * Psym * mp.Lambda).trace()) *
              mp.dt;
}

// ============================ full sweep ==================================

template <class Scalar>
struct SolveResult {
  QuadraticValue<Scalar> value;
  std::vector<ConditionReport> reports;  // one per step k = 0..K-1
};

// Full backward sweep k = K-1..0 from the zero terminal triple. Fails fast
// on the first violated condition, identifying the step and block; every
// visited step's ConditionReport is archived in sweep order.
template <class Scalar>
SolveResult<Scalar> solve(const MarketParams<Scalar>& mp,
                          const ExplorationSchedule<Scalar>& sched) {
  if (mp.theta <= Scalar(0))
    throw SchemaError("solve requires theta > 0 (theta = 0 is Kelly mode)");
  const ValidationReport vr = validate_params(mp);
  if (!vr.ok) throw SchemaError("invalid parameters: " + vr.errors.front());
  if (sched.psi.size() != static_cast<std::size_t>(mp.K))
    throw SchemaError("exploration schedule must have K entries");

  SolveResult<Scalar> out;
  const std::size_t KZ = static_cast<std::size_t>(mp.K);
  out.value.P.assign(KZ + 1, Mat<Scalar>::Zero(mp.n, mp.n));
  out.value.p.assign(KZ + 1, Vec<Scalar>::Zero(mp.n));
  out.value.r.assign(KZ + 1, Scalar(0));
  out.reports.resize(KZ);

  for (index_t k = mp.K - 1; k >= 0; --k) {
    const std::size_t kz = static_cast<std::size_t>(k);
    out.reports[kz] = check_saddle_conditions<Scalar>(mp, out.value.P[kz + 1],
                                                      sched.at(k));
    if (!out.reports[kz].curvature_pass()) {
      const char* block = out.reports[kz].curvature_blockA.pass
                              ? "curvature_blockB"
                              : "curvature_blockA";
      throw SaddleConditionError(
          "saddle condition failed at step " + std::to_string(k) + " (" +
              block + ")",
          k, out.reports[kz]);
    }
    step_back<Scalar>(mp, out.value.P[kz + 1], out.value.p[kz + 1],
                      out.value.r[kz + 1], sched.at(k), out.value.P[kz],
                      out.value.p[kz], out.value.r[kz], k);
    if (!all_finite<Scalar>(out.value.P[kz]) ||
        !out.value.p[kz].allFinite() || !std::isfinite(double(out.value.r[kz])))
      throw NumericalError("non-finite value coefficients at step " +
                           std::to_string(k));
  }
  return out;
}

// ============================ evaluation ==================================

template <class Scalar>
Scalar value_at(const QuadraticValue<Scalar>& qv, index_t k,
                const Vec<Scalar>& X) {
  if (k < 0 || k > qv.K()) throw SchemaError("index out of range");
  const std::size_t kz = static_cast<std::size_t>(k);
  return quad_eval<Scalar>(qv.P[kz], qv.p[kz], qv.r[kz], X);
}

// The two criterion values implied by the solved game: the attained
// exponential criterion inf I = exp(u_0(X0)) and the certainty-equivalent
// growth criterion sup J = -u_0(X0)/theta. If exp overflows, inf_I is
// reported as +inf with the overflow flag set; u0 (= ln inf I) is always
// exact.
template <class Scalar>
struct CriterionValues {
  Scalar u0 = Scalar(0);     // value at (0, X0); equals ln(inf I)
  Scalar inf_I = Scalar(0);  // exp(u0), +inf on overflow
  Scalar sup_J = Scalar(0);  // -u0/theta
  bool overflowed = false;
};

template <class Scalar>
CriterionValues<Scalar> criterion_from_value(const QuadraticValue<Scalar>& qv,
                                             const Vec<Scalar>& X0,
                                             Scalar theta) {
  if (theta <= Scalar(0))
    throw SchemaError("criterion requires theta > 0 (theta = 0 is Kelly mode)");
  CriterionValues<Scalar> cv;
  cv.u0 = value_at<Scalar>(qv, 0, X0);
  cv.inf_I = std::exp(cv.u0);
  cv.overflowed = !std::isfinite(double(cv.inf_I));
  cv.sup_J = -cv.u0 / theta;
  return cv;
}

}  // namespace rskelly

#endif  // RSKELLY_RICCATI_H
