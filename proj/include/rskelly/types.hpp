// Common dense types, exceptions and small numeric helpers shared by all
// modules. Everything is templated on the scalar type; Eigen is the only
// math dependency.
#ifndef RSKELLY_TYPES_H
#define RSKELLY_TYPES_H

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rskelly {

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <class Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using index_t = Eigen::Index;

// ============================= error taxonomy =============================
//
// SchemaError      -> malformed configuration / dimension mismatch (CLI exit 1)
// ConditionError   -> a saddle/curvature condition failed; carries the step
//                     index at which it failed (CLI exit 2)
// NumericalError   -> runtime numerical breakdown: NaN/Inf, failed
//                     factorization, diverging iteration (CLI exit 3)

class SchemaError : public std::runtime_error {
public:
  explicit SchemaError(const std::string& what) : std::runtime_error(what) {}
};

class ConditionError : public std::runtime_error {
public:
  ConditionError(const std::string& what, index_t step)
      : std::runtime_error(what), step_(step) {}
  index_t step() const { return step_; }

private:
  index_t step_;
};

class NumericalError : public std::runtime_error {
public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

// ============================ numeric helpers =============================

// Smallest and largest eigenvalue of the symmetrized part of M.
template <class Scalar>
std::pair<Scalar, Scalar> symmetric_eig_range(const Mat<Scalar>& M) {
  Mat<Scalar> S = Scalar(0.5) * (M + M.transpose());
  Eigen::SelfAdjointEigenSolver<Mat<Scalar>> es(S);
  if (es.info() != Eigen::Success)
    throw NumericalError("eigendecomposition failed");
  const auto& ev = es.eigenvalues();
  return {ev.minCoeff(), ev.maxCoeff()};
}

// Symmetric positive definiteness with a relative threshold: all eigenvalues
// of the symmetrized matrix must exceed rel_tol * max(1, |lambda|_max).
// A successful LLT is accepted as a fast positive witness.
template <class Scalar>
bool is_spd(const Mat<Scalar>& M, Scalar rel_tol = Scalar(1e-12)) {
  Mat<Scalar> S = Scalar(0.5) * (M + M.transpose());
  Eigen::LLT<Mat<Scalar>> llt(S);
  if (llt.info() == Eigen::Success) return true;
  auto [lo, hi] = symmetric_eig_range(S);
  const Scalar scale = std::max(Scalar(1), std::abs(hi));
  return lo > rel_tol * scale;
}

// Margin of positive definiteness: the smallest eigenvalue of the
// symmetrized matrix (positive = PD with that margin, negative = violated).
template <class Scalar>
Scalar spd_margin(const Mat<Scalar>& M) {
  return symmetric_eig_range<Scalar>(M).first;
}

// Solve M * X = B for a well-conditioned square M via partial-pivot LU,
// throwing on (near-)singularity.
template <class Scalar>
Mat<Scalar> solve_linear(const Mat<Scalar>& M, const Mat<Scalar>& B,
                         const char* label) {
  Eigen::FullPivLU<Mat<Scalar>> lu(M);
  if (!lu.isInvertible())
    throw NumericalError(std::string(label) + ": matrix not invertible");
  return lu.solve(B);
}

template <class Scalar>
bool all_finite(const Mat<Scalar>& M) {
  return M.allFinite();
}

// Quadratic-value evaluation 0.5*x'Px + p'x + r.
template <class Scalar>
Scalar quad_eval(const Mat<Scalar>& P, const Vec<Scalar>& p, Scalar r,
                 const Vec<Scalar>& x) {
  return Scalar(0.5) * x.dot(P * x) + p.dot(x) + r;
}

}  // namespace rskelly

#endif  // RSKELLY_TYPES_H
