// Market model primitives: parameter bundle, derived constants, exploration
// schedules, state-feedback policies, and the parameter / exploration-bound
// validators.
//
// Discrete-time market over K intervals of length dt with m risky assets,
// n factors and a d-dimensional Gaussian shock per interval:
//   factors      X_{k+1} = b*dt + Btilde*X_k + Lambda*w_k,  Btilde = I + B*dt
//   asset i      log S_i gains (a + A X_k)_i dt - 0.5*(Sigma Sigma')_ii dt
//                + (Sigma w_k)_i over the interval
//   benchmark    log L gains (c + C'X_k) dt - 0.5*Xi'Xi dt + Xi'w_k
// w_k ~ N(0, dt * I_d). theta >= 0 is the risk-sensitivity parameter of the
// criterion -(1/theta) ln E[ exp(-theta * (R_T - R_0)) ], with theta = 0 the
// log-utility (Kelly) limit.
#ifndef RSKELLY_MODEL_H
#define RSKELLY_MODEL_H

#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rskelly/types.hpp"

namespace rskelly {

template <class Scalar>
struct MarketParams {
  index_t m = 0;  // risky assets
  index_t n = 0;  // factors
  index_t d = 0;  // shock dimension

  Vec<Scalar> a;       // m      asset drift intercept
  Mat<Scalar> A;       // m x n  asset drift factor loading
  Mat<Scalar> Sigma;   // m x d  asset diffusion
  Vec<Scalar> b;       // n      factor drift intercept
  Mat<Scalar> Bmat;    // n x n  factor mean reversion
  Mat<Scalar> Lambda;  // n x d  factor diffusion
  Scalar c = Scalar(0);  // benchmark drift intercept
  Vec<Scalar> Cvec;    // n      benchmark drift factor loading
  Vec<Scalar> Xi;      // d      benchmark diffusion

  Scalar dt = Scalar(0);
  index_t K = 0;
  Scalar theta = Scalar(0);
};

template <class Scalar>
struct DerivedConstants {
  Mat<Scalar> Btilde;        // I + B*dt
  Mat<Scalar> SigmaGram;     // Sigma Sigma'
  Mat<Scalar> SigmaGramInv;  // (Sigma Sigma')^{-1}
  Scalar T = Scalar(0);      // K * dt
};

template <class Scalar>
DerivedConstants<Scalar> derive_constants(const MarketParams<Scalar>& mp) {
  DerivedConstants<Scalar> dc;
  dc.Btilde = Mat<Scalar>::Identity(mp.n, mp.n) + mp.Bmat * mp.dt;
  dc.SigmaGram = mp.Sigma * mp.Sigma.transpose();
  dc.SigmaGramInv =
      solve_linear<Scalar>(dc.SigmaGram, Mat<Scalar>::Identity(mp.m, mp.m),
                           "Sigma Sigma'");
  dc.T = static_cast<Scalar>(mp.K) * mp.dt;
  return dc;
}

// Per-step exploration covariances Psi_k (m x m SPD), one per interval.
template <class Scalar>
struct ExplorationSchedule {
  std::vector<Mat<Scalar>> psi;  // size K

  static ExplorationSchedule constant(Mat<Scalar> psi_k, index_t K) {
    ExplorationSchedule s;
    s.psi.assign(static_cast<std::size_t>(K), std::move(psi_k));
    return s;
  }
  const Mat<Scalar>& at(index_t k) const {
    return psi.at(static_cast<std::size_t>(k));
  }
};

// A deterministic state-feedback allocation rule hbar = pi(k, X), tagged by
// provenance so reports can tell an analytic rule from a learned one.
enum class PolicyTag { analytic_optimal, affine_learned, constant };

template <class Scalar>
struct StatePolicy {
  std::function<Vec<Scalar>(index_t, const Vec<Scalar>&)> h;
  PolicyTag tag = PolicyTag::constant;

  Vec<Scalar> operator()(index_t k, const Vec<Scalar>& X) const {
    return h(k, X);
  }
};

// ============================== validation ================================

struct ValidationReport {
  bool ok = true;
  std::vector<std::string> errors;
  std::vector<std::string> warnings;
};

namespace detail {

inline void check_dims(ValidationReport& rep, bool good, const std::string& msg) {
  if (!good) {
    rep.ok = false;
    rep.errors.push_back(msg);
  }
}

template <class Scalar>
std::string dim_str(const Mat<Scalar>& M) {
  std::ostringstream os;
  os << M.rows() << "x" << M.cols();
  return os.str();
}

}  // namespace detail

// Structural validation: dimensions, positivity of dt, K >= 1, theta >= 0,
// full row rank of Sigma, finiteness. Deterministic: the report depends only
// on the parameter values.
template <class Scalar>
ValidationReport validate_params(const MarketParams<Scalar>& mp) {
  ValidationReport rep;
  using detail::check_dims;
  using detail::dim_str;

  check_dims(rep, mp.m >= 1, "m must be >= 1");
  check_dims(rep, mp.n >= 1, "n must be >= 1");
  check_dims(rep, mp.d >= 1, "d must be >= 1");
  if (!rep.ok) return rep;

  check_dims(rep, mp.a.size() == mp.m, "a must have length m");
  check_dims(rep, mp.A.rows() == mp.m && mp.A.cols() == mp.n,
             "A must be m x n, got " + dim_str(mp.A));
  check_dims(rep, mp.Sigma.rows() == mp.m && mp.Sigma.cols() == mp.d,
             "Sigma must be m x d, got " + dim_str(mp.Sigma));
  check_dims(rep, mp.b.size() == mp.n, "b must have length n");
  check_dims(rep, mp.Bmat.rows() == mp.n && mp.Bmat.cols() == mp.n,
             "B must be n x n, got " + dim_str(mp.Bmat));
  check_dims(rep, mp.Lambda.rows() == mp.n && mp.Lambda.cols() == mp.d,
             "Lambda must be n x d, got " + dim_str(mp.Lambda));
  check_dims(rep, mp.Cvec.size() == mp.n, "C must have length n");
  check_dims(rep, mp.Xi.size() == mp.d, "Xi must have length d");
  check_dims(rep, mp.dt > Scalar(0), "dt must be > 0");
  check_dims(rep, mp.K >= 1, "K must be >= 1");
  check_dims(rep, mp.theta >= Scalar(0), "theta must be >= 0");
  if (!rep.ok) return rep;

  bool finite = mp.a.allFinite() && mp.A.allFinite() && mp.Sigma.allFinite() &&
                mp.b.allFinite() && mp.Bmat.allFinite() &&
                mp.Lambda.allFinite() && std::isfinite(double(mp.c)) &&
                mp.Cvec.allFinite() && mp.Xi.allFinite() &&
                std::isfinite(double(mp.dt)) && std::isfinite(double(mp.theta));
  check_dims(rep, finite, "parameters must be finite");
  if (!rep.ok) return rep;

  Mat<Scalar> gram = mp.Sigma * mp.Sigma.transpose();
  if (!is_spd<Scalar>(gram)) {
    rep.ok = false;
    rep.errors.push_back("ΣΣ' singular");
  }

  if (mp.d != mp.n + mp.m + 1 && mp.d != mp.n + mp.m)
    rep.warnings.push_back(
        "d is typically n+m+1 (or n+m when the benchmark is spanned)");
  return rep;
}

// ========================== exploration bound =============================

struct BoundReport {
  bool ok = true;
  // Smallest eigenvalue of inv(Psi_k) - theta * SigmaGram * dt per step;
  // positive margin = admissible exploration at that step.
  std::vector<double> margins;
  index_t first_violation_step = -1;
  bool theta_zero = false;  // bound is vacuous at theta = 0
};

// Admissibility of the exploration schedule: for each step,
//   inv(Psi_k) - theta * Sigma Sigma' * dt  must be positive definite.
// At theta = 0 the report always passes (vacuous bound). Margins shrink
// monotonically as Psi is scaled up, so scaling an admissible schedule down
// never flips the verdict.
template <class Scalar>
BoundReport exploration_bound_ok(const MarketParams<Scalar>& mp,
                                 const ExplorationSchedule<Scalar>& sched) {
  BoundReport rep;
  if (sched.psi.size() != static_cast<std::size_t>(mp.K))
    throw SchemaError("exploration schedule must have K entries");
  if (mp.theta == Scalar(0)) {
    rep.theta_zero = true;
    rep.margins.assign(sched.psi.size(), 0.0);
    return rep;
  }
  const Mat<Scalar> gram = mp.Sigma * mp.Sigma.transpose();
  for (std::size_t k = 0; k < sched.psi.size(); ++k) {
    const Mat<Scalar>& psi = sched.psi[k];
    if (psi.rows() != mp.m || psi.cols() != mp.m)
      throw SchemaError("Psi_k must be m x m");
    if (!is_spd<Scalar>(psi))
      throw SchemaError("exploration covariance not SPD");
    Mat<Scalar> psi_inv = solve_linear<Scalar>(
        psi, Mat<Scalar>::Identity(mp.m, mp.m), "Psi_k");
    Mat<Scalar> gap = psi_inv - mp.theta * gram * mp.dt;
    double margin = double(spd_margin<Scalar>(gap));
    rep.margins.push_back(margin);
    if (margin <= 0.0 && rep.ok) {
      rep.ok = false;
      rep.first_violation_step = static_cast<index_t>(k);
    }
  }
  return rep;
}

}  // namespace rskelly

#endif  // RSKELLY_MODEL_H
