#pragma once

#include "phidpc/basis.hpp"
#include "phidpc/common.hpp"

#include <Eigen/Cholesky>
#include <Eigen/SVD>

namespace phidpc {

enum class FitVariant { LeastSquares, Ridge };

/**
 * @brief Multi-step predictor Y_f ~ Theta * Phi identified from lifted data.
 *
 * Keeps the data it was fitted on: the pseudo-inverse of Phi is needed by the
 * regularized behavioral controllers, and the null-space basis by the
 * consistency diagnostic.
 */
template <typename Scalar = double>
struct IdentifiedPredictor
{
  Matrix<Scalar> theta;  ///< N*p x (L+1)
  FitVariant variant = FitVariant::LeastSquares;
  Scalar gamma = Scalar(0);
  LiftedDataMatrix<Scalar> lifted;
  Matrix<Scalar> yf;
  Matrix<Scalar> residuals;        ///< E = Yf - Theta Phi
  Matrix<Scalar> phi_pinv;         ///< T x (L+1)
  Matrix<Scalar> nullspace_basis;  ///< T x (T - rank), orthonormal columns; empty when over the cap
  bool has_nullspace = false;
  Index rank = 0;

  const Matrix<Scalar> & phi() const { return lifted.phi; }
  const BasisSet<Scalar> & basis() const { return lifted.basis; }
  Index horizon() const { return lifted.basis.horizon; }
  Index t_ini() const { return lifted.basis.t_ini; }
};

struct FitOptions
{
  /// Null-space bases with more columns than this are not stored.
  Index nullspace_cap = 4096;
};

namespace detail {

/// Pseudo-inverse, rank and (optionally) null space from one SVD of Phi^T.
template <typename Scalar>
void decompose_phi(IdentifiedPredictor<Scalar> & pred, const FitOptions & options)
{
  const Matrix<Scalar> & phi = pred.lifted.phi;
  const Index rows = phi.rows();
  const Index cols = phi.cols();
  const Index null_dim_upper = cols - std::min(rows, cols);
  const bool want_null = null_dim_upper <= options.nullspace_cap;

  const Matrix<Scalar> phit = phi.transpose();
  Eigen::BDCSVD<Matrix<Scalar>> svd(phit, want_null ? (Eigen::ComputeFullU | Eigen::ComputeThinV)
                                                    : (Eigen::ComputeThinU | Eigen::ComputeThinV));
  const Vector<Scalar> & sv = svd.singularValues();
  const Scalar cutoff = sv.size() > 0 ? pred.lifted.rank_tolerance * sv(0) : Scalar(0);
  Index r = 0;
  while (r < sv.size() && sv(r) > cutoff) {
    ++r;
  }
  pred.rank = r;

  // Phi^T = U S V^T  =>  Phi^+ = U S^-1 V^T (T x (L+1)).
  const auto u = svd.matrixU().leftCols(r);
  const auto v = svd.matrixV().leftCols(r);
  pred.phi_pinv = u * sv.head(r).cwiseInverse().asDiagonal() * v.transpose();

  pred.has_nullspace = want_null;
  if (want_null) {
    pred.nullspace_basis = svd.matrixU().rightCols(cols - r);
  } else {
    pred.nullspace_basis.resize(cols, 0);
  }
}

}  // namespace detail

/**
 * @brief Theta* = Yf Phi^+, the least-squares multi-step predictor.
 *
 * Throws RankDeficient when Phi lacks full row rank; fit_ridge handles that case.
 */
template <typename Scalar>
IdentifiedPredictor<Scalar> fit_least_squares(const LiftedDataMatrix<Scalar> & lifted, const Matrix<Scalar> & yf,
                                              const FitOptions & options = {})
{
  detail::require(yf.cols() == lifted.phi.cols(),
                  "Yf has " + std::to_string(yf.cols()) + " columns but Phi has " +
                      std::to_string(lifted.phi.cols()));
  if (!lifted.row_rank_ok) {
    throw RankDeficient("Phi (" + detail::shape(lifted.rows(), lifted.cols()) +
                        ") does not have full row rank; least squares is ill-posed, use fit_ridge with gamma > 0");
  }
  IdentifiedPredictor<Scalar> pred;
  pred.variant = FitVariant::LeastSquares;
  pred.lifted = lifted;
  pred.yf = yf;
  detail::decompose_phi(pred, options);
  pred.theta = yf * pred.phi_pinv;
  pred.residuals = yf - pred.theta * lifted.phi;
  return pred;
}

/// Theta^R = Yf Phi^T (Phi Phi^T + gamma I)^-1, via Cholesky.
template <typename Scalar>
IdentifiedPredictor<Scalar> fit_ridge(const LiftedDataMatrix<Scalar> & lifted, const Matrix<Scalar> & yf, Scalar gamma,
                                      const FitOptions & options = {})
{
  detail::require(gamma > Scalar(0), "ridge parameter gamma must be positive");
  detail::require(yf.cols() == lifted.phi.cols(),
                  "Yf has " + std::to_string(yf.cols()) + " columns but Phi has " +
                      std::to_string(lifted.phi.cols()));
  IdentifiedPredictor<Scalar> pred;
  pred.variant = FitVariant::Ridge;
  pred.gamma = gamma;
  pred.lifted = lifted;
  pred.yf = yf;

  Matrix<Scalar> gram = lifted.phi * lifted.phi.transpose();
  gram.diagonal().array() += gamma;
  Eigen::LLT<Matrix<Scalar>> llt(gram);
  if (llt.info() != Eigen::Success) {
    throw RankDeficient("Cholesky of Phi Phi^T + gamma I failed; increase gamma");
  }
  pred.theta = llt.solve(lifted.phi * yf.transpose()).transpose();
  pred.residuals = yf - pred.theta * lifted.phi;
  detail::decompose_phi(pred, options);
  return pred;
}

/// Theta * phi_bar(u_ini, y_ini, u_f).
template <typename Scalar>
Vector<Scalar> predict(const IdentifiedPredictor<Scalar> & pred, const BasisSet<Scalar> & basis,
                       ConstVectorRef<Scalar> u_ini, ConstVectorRef<Scalar> y_ini,
                       ConstVectorRef<Scalar> u_f)
{
  detail::require(basis.size() == pred.theta.cols(),
                  "basis has " + std::to_string(basis.size()) + " functions but Theta has " +
                      std::to_string(pred.theta.cols()) + " columns");
  return pred.theta * eval_basis<Scalar>(basis, u_ini, y_ini, u_f);
}

/**
 * @brief Largest ||E g|| over unit vectors g in the null space of Phi.
 *
 * Zero exactly when the behavioral predictor built from (Phi, Yf) agrees with the
 * least-squares predictor for every window and input. For a least-squares fit
 * E vanishes on the row space of Phi, so this is the spectral norm of E.
 */
template <typename Scalar>
Scalar consistency_diagnostic(const IdentifiedPredictor<Scalar> & pred)
{
  Matrix<Scalar> projected;
  if (pred.has_nullspace) {
    if (pred.nullspace_basis.cols() == 0) {
      return Scalar(0);
    }
    projected = pred.residuals * pred.nullspace_basis;
  } else {
    projected = pred.residuals - (pred.residuals * pred.phi_pinv) * pred.lifted.phi;
  }
  if (projected.size() == 0) {
    return Scalar(0);
  }
  return Eigen::BDCSVD<Matrix<Scalar>>(projected).singularValues()(0);
}

}  // namespace phidpc
