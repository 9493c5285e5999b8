#pragma once

#include "phidpc/common.hpp"

#include <Eigen/Cholesky>
#include <Eigen/LU>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace phidpc {

/**
 * @brief min 1/2 z'Hz + f'z + objective_offset  s.t.  A_eq z = b_eq,  lb <= z <= ub.
 *
 * Infinite bounds are allowed. objective_offset only shifts the reported objective.
 */
template <typename Scalar = double>
struct QpProblem
{
  Matrix<Scalar> H;
  Vector<Scalar> f;
  Matrix<Scalar> A_eq;
  Vector<Scalar> b_eq;
  Vector<Scalar> lb;
  Vector<Scalar> ub;
  Scalar objective_offset = Scalar(0);

  Index variables() const { return H.rows(); }
  Index equalities() const { return A_eq.rows(); }

  /// Unconstrained-box problem with n variables and no equalities.
  static QpProblem unbounded(Index n)
  {
    constexpr Scalar inf = std::numeric_limits<Scalar>::infinity();
    QpProblem p;
    p.H = Matrix<Scalar>::Zero(n, n);
    p.f = Vector<Scalar>::Zero(n);
    p.A_eq.resize(0, n);
    p.b_eq.resize(0);
    p.lb = Vector<Scalar>::Constant(n, -inf);
    p.ub = Vector<Scalar>::Constant(n, inf);
    return p;
  }
};

enum class QpStatus { Optimal, Infeasible, MaxIter };

inline const char * to_string(QpStatus status)
{
  switch (status) {
    case QpStatus::Optimal: return "optimal";
    case QpStatus::Infeasible: return "infeasible";
    case QpStatus::MaxIter: return "max-iter";
  }
  return "unknown";
}

template <typename Scalar = double>
struct QpSolution
{
  Vector<Scalar> z;
  Scalar objective = Scalar(0);
  QpStatus status = QpStatus::MaxIter;
  Scalar kkt_residual = std::numeric_limits<Scalar>::infinity();
  Index iterations = 0;
  // Lagrangian: L = 1/2 z'Hz + f'z - y'(Az - b) - zl'(z - lb) - zu'(ub - z).
  Vector<Scalar> dual_eq;
  Vector<Scalar> dual_lower;
  Vector<Scalar> dual_upper;

  bool optimal() const { return status == QpStatus::Optimal; }
};

struct QpSettings
{
  double tol = 1e-8;
  int max_iter = 200;
  /// Reject H whose smallest eigenvalue is below -1e-10 ||H||.
  bool check_convexity = true;
};

namespace detail {

template <typename Scalar>
Scalar max_abs(ConstVectorRef<Scalar> v)
{
  return v.size() == 0 ? Scalar(0) : v.cwiseAbs().maxCoeff();
}

template <typename Scalar>
void validate_qp(const QpProblem<Scalar> & p)
{
  const Index n = p.H.rows();
  require(p.H.cols() == n, "H must be square, got " + shape(p.H.rows(), p.H.cols()));
  require(p.f.size() == n, "f has length " + std::to_string(p.f.size()) + ", expected " + std::to_string(n));
  require(p.A_eq.cols() == n, "A_eq has " + std::to_string(p.A_eq.cols()) + " columns, expected " +
                                  std::to_string(n));
  require(p.b_eq.size() == p.A_eq.rows(), "b_eq length does not match the rows of A_eq");
  require(p.lb.size() == n && p.ub.size() == n, "bounds must have one entry per variable");
  for (Index i = 0; i < n; ++i) {
    require(!(p.lb(i) > p.ub(i)), "lower bound exceeds upper bound at index " + std::to_string(i));
    require(!std::isnan(p.lb(i)) && !std::isnan(p.ub(i)), "NaN bound at index " + std::to_string(i));
  }
  require(p.H.allFinite() && p.f.allFinite() && p.A_eq.allFinite() && p.b_eq.allFinite(),
          "QP data contains non-finite entries");
  const Scalar scale = std::max(Scalar(1), p.H.cwiseAbs().maxCoeff());
  require((p.H - p.H.transpose()).cwiseAbs().maxCoeff() <= Scalar(1e-12) * scale, "H is not symmetric");
}

template <typename Scalar>
void check_psd(const Matrix<Scalar> & H)
{
  const Index n = H.rows();
  if (n == 0) {
    return;
  }
  const Scalar norm = H.cwiseAbs().rowwise().sum().maxCoeff();
  if (norm == Scalar(0)) {
    return;
  }
  Matrix<Scalar> shifted = H;
  shifted.diagonal().array() += Scalar(1e-10) * norm;
  Eigen::LLT<Matrix<Scalar>> llt(shifted);
  if (llt.info() != Eigen::Success) {
    throw InvalidArgument("H is not positive semidefinite (smallest eigenvalue below -1e-10 ||H||)");
  }
}

/// Least-squares residual of A z = b, used to detect inconsistent equalities.
template <typename Scalar>
Scalar equality_inconsistency(const Matrix<Scalar> & A, const Vector<Scalar> & b)
{
  if (A.rows() == 0) {
    return Scalar(0);
  }
  Eigen::CompleteOrthogonalDecomposition<Matrix<Scalar>> cod(A);
  cod.setThreshold(Scalar(1e-12));
  const Vector<Scalar> z = cod.solve(b);
  return max_abs<Scalar>(A * z - b);
}

/**
 * Primal-dual interior point (Mehrotra predictor-corrector) with implicit slacks
 * s = z - lb and t = ub - z. Each Newton system is the full KKT matrix
 *   [H + Sigma + rho I   A^T  ] [dz]   [r1]
 *   [A                  -rho I] [w ] = [r2]
 * factored by partial-pivot LU. A copy with a small quasi-definite shift is used only when
 * the unshifted factorization cannot solve the system; solves are refined against the
 * unshifted matrix.
 */
template <typename Scalar>
class InteriorPoint
{
public:
  InteriorPoint(const QpProblem<Scalar> & p, const QpSettings & settings) : p_(p), settings_(settings)
  {
    const Index n = p_.H.rows();
    for (Index i = 0; i < n; ++i) {
      if (std::isfinite(p_.lb(i))) {
        lower_.push_back(i);
      }
      if (std::isfinite(p_.ub(i))) {
        upper_.push_back(i);
      }
    }
    data_scale_ = std::max({Scalar(1), p_.H.size() ? p_.H.cwiseAbs().maxCoeff() : Scalar(0),
                            p_.A_eq.size() ? p_.A_eq.cwiseAbs().maxCoeff() : Scalar(0)});
    reg_ = Scalar(1e-11) * data_scale_;
  }

  QpSolution<Scalar> solve()
  {
    const Index n = p_.H.rows();
    const Index q = p_.A_eq.rows();
    const Index nl = static_cast<Index>(lower_.size());
    const Index nu = static_cast<Index>(upper_.size());
    const Index nb = nl + nu;
    const Scalar tol = static_cast<Scalar>(settings_.tol);

    Vector<Scalar> z = initial_point();
    Vector<Scalar> y = Vector<Scalar>::Zero(q);
    Vector<Scalar> zl = Vector<Scalar>::Ones(nl);
    Vector<Scalar> zu = Vector<Scalar>::Ones(nu);

    const Scalar f_scale = Scalar(1) + max_abs<Scalar>(p_.f);

    QpSolution<Scalar> sol;
    sol.status = QpStatus::MaxIter;
    Scalar best_primal = std::numeric_limits<Scalar>::infinity();
    int stalled = 0;

    for (int iter = 0; iter <= settings_.max_iter; ++iter) {
      Vector<Scalar> s(nl), t(nu);
      for (Index i = 0; i < nl; ++i) s(i) = z(lower_[static_cast<std::size_t>(i)]) - p_.lb(lower_[static_cast<std::size_t>(i)]);
      for (Index i = 0; i < nu; ++i) t(i) = p_.ub(upper_[static_cast<std::size_t>(i)]) - z(upper_[static_cast<std::size_t>(i)]);

      const Vector<Scalar> rd = dual_residual(z, y, zl, zu);
      const Vector<Scalar> rp = p_.A_eq * z - p_.b_eq;
      const Scalar comp = (nl ? s.dot(zl) : Scalar(0)) + (nu ? t.dot(zu) : Scalar(0));
      const Scalar mu = nb > 0 ? comp / static_cast<Scalar>(nb) : Scalar(0);
      const Scalar rd_norm = max_abs<Scalar>(rd) / f_scale;
      const Scalar rp_norm = max_abs<Scalar>(rp);

      sol.iterations = iter;
      sol.kkt_residual = std::max({rd_norm, rp_norm, comp});
      if (sol.kkt_residual <= tol) {
        sol.status = QpStatus::Optimal;
        finish(sol, z, y, zl, zu);
        return sol;
      }
      if (iter == settings_.max_iter) {
        break;
      }

      // Divergence of the duals or a stalled primal residual signals infeasibility.
      const Scalar dual_size = std::max({max_abs<Scalar>(y), max_abs<Scalar>(zl), max_abs<Scalar>(zu)});
      if (dual_size > Scalar(1e14) * f_scale) {
        break;
      }
      if (rp_norm < Scalar(0.9) * best_primal) {
        best_primal = rp_norm;
        stalled = 0;
      } else if (rp_norm > tol && ++stalled > 30) {
        break;
      }

      Vector<Scalar> sigma_diag = Vector<Scalar>::Zero(n);
      for (Index i = 0; i < nl; ++i) sigma_diag(lower_[static_cast<std::size_t>(i)]) += zl(i) / s(i);
      for (Index i = 0; i < nu; ++i) sigma_diag(upper_[static_cast<std::size_t>(i)]) += zu(i) / t(i);
      factor(sigma_diag);

      // Predictor (affine scaling) direction.
      Vector<Scalar> rcl = s.cwiseProduct(zl);
      Vector<Scalar> rcu = t.cwiseProduct(zu);
      Direction aff = direction(rd, rp, s, t, zl, zu, rcl, rcu);
      Scalar alpha_aff = step_length(s, t, zl, zu, aff, Scalar(1));
      Vector<Scalar> rcl2 = rcl;
      Vector<Scalar> rcu2 = rcu;
      if (nb > 0) {
        const Scalar mu_aff = ((s + alpha_aff * aff.ds).dot(zl + alpha_aff * aff.dzl) +
                               (t + alpha_aff * aff.dt).dot(zu + alpha_aff * aff.dzu)) /
                              static_cast<Scalar>(nb);
        const Scalar ratio = mu > Scalar(0) ? mu_aff / mu : Scalar(0);
        const Scalar sigma = std::clamp(ratio * ratio * ratio, Scalar(0), Scalar(1));
        rcl2 = rcl + aff.ds.cwiseProduct(aff.dzl) - Vector<Scalar>::Constant(nl, sigma * mu);
        rcu2 = rcu + aff.dt.cwiseProduct(aff.dzu) - Vector<Scalar>::Constant(nu, sigma * mu);
      }
      Direction d = nb > 0 ? direction(rd, rp, s, t, zl, zu, rcl2, rcu2) : aff;
      const Scalar alpha = nb > 0 ? step_length(s, t, zl, zu, d, Scalar(0.995)) : Scalar(1);

      z += alpha * d.dz;
      y += alpha * d.dy;
      zl += alpha * d.dzl;
      zu += alpha * d.dzu;
    }

    finish(sol, z, y, zl, zu);
    return sol;
  }

private:
  struct Direction
  {
    Vector<Scalar> dz, dy, dzl, dzu, ds, dt;
  };

  Vector<Scalar> initial_point() const
  {
    const Index n = p_.H.rows();
    Vector<Scalar> z = Vector<Scalar>::Zero(n);
    for (Index i = 0; i < n; ++i) {
      const Scalar lo = p_.lb(i);
      const Scalar hi = p_.ub(i);
      const bool has_lo = std::isfinite(lo);
      const bool has_hi = std::isfinite(hi);
      if (has_lo && has_hi) {
        const Scalar margin = std::min(Scalar(1), Scalar(0.25) * (hi - lo));
        z(i) = std::clamp(Scalar(0), lo + margin, hi - margin);
      } else if (has_lo) {
        z(i) = std::max(Scalar(0), lo + Scalar(1));
      } else if (has_hi) {
        z(i) = std::min(Scalar(0), hi - Scalar(1));
      }
    }
    return z;
  }

  Vector<Scalar> dual_residual(const Vector<Scalar> & z, const Vector<Scalar> & y, const Vector<Scalar> & zl,
                               const Vector<Scalar> & zu) const
  {
    Vector<Scalar> rd = p_.H * z + p_.f;
    if (p_.A_eq.rows() > 0) {
      rd.noalias() -= p_.A_eq.transpose() * y;
    }
    for (std::size_t i = 0; i < lower_.size(); ++i) rd(lower_[i]) -= zl(static_cast<Index>(i));
    for (std::size_t i = 0; i < upper_.size(); ++i) rd(upper_[i]) += zu(static_cast<Index>(i));
    return rd;
  }

  void factor(const Vector<Scalar> & sigma_diag)
  {
    const Index n = p_.H.rows();
    const Index q = p_.A_eq.rows();
    exact_.resize(n + q, n + q);
    exact_.topLeftCorner(n, n) = p_.H;
    exact_.topLeftCorner(n, n).diagonal() += sigma_diag;
    exact_.topRightCorner(n, q) = p_.A_eq.transpose();
    exact_.bottomLeftCorner(q, n) = p_.A_eq;
    exact_.bottomRightCorner(q, q).setZero();
    lu_.compute(exact_);
    regularized_ready_ = false;
  }

  /// LU of the KKT matrix with a small quasi-definite shift, built on first use.
  const Eigen::PartialPivLU<Matrix<Scalar>> & regularized_lu() const
  {
    if (!regularized_ready_) {
      const Index n = p_.H.rows();
      const Index q = p_.A_eq.rows();
      Matrix<Scalar> shifted = exact_;
      shifted.topLeftCorner(n, n).diagonal().array() += reg_;
      shifted.bottomRightCorner(q, q).diagonal().array() -= reg_;
      regularized_lu_.compute(shifted);
      regularized_ready_ = true;
    }
    return regularized_lu_;
  }

  /// Solve with iterative refinement against the exact matrix; returns the final residual.
  Scalar refine(const Eigen::PartialPivLU<Matrix<Scalar>> & lu, const Vector<Scalar> & rhs, Vector<Scalar> & x) const
  {
    x = lu.solve(rhs);
    if (!x.allFinite()) {
      return std::numeric_limits<Scalar>::infinity();
    }
    Scalar prev = max_abs<Scalar>(rhs - exact_ * x);
    for (int k = 0; k < 8 && prev > Scalar(0); ++k) {
      const Vector<Scalar> step = lu.solve(rhs - exact_ * x);
      const Vector<Scalar> candidate = x + step;
      const Scalar rn = candidate.allFinite() ? max_abs<Scalar>(rhs - exact_ * candidate) : prev;
      if (!(rn < prev)) {
        break;
      }
      x = candidate;
      prev = rn;
    }
    return prev;
  }

  Vector<Scalar> kkt_solve(const Vector<Scalar> & rhs) const
  {
    // The unshifted factorization is accurate whenever the KKT matrix is nonsingular,
    // even when badly conditioned. A singular matrix (dependent equalities, flat
    // directions of H) falls back to the shifted one.
    Vector<Scalar> x;
    const Scalar accept = Scalar(1e-10) * (Scalar(1) + max_abs<Scalar>(rhs));
    const Scalar r_exact = refine(lu_, rhs, x);
    if (r_exact <= accept) {
      return x;
    }
    Vector<Scalar> x_reg;
    const Scalar r_reg = refine(regularized_lu(), rhs, x_reg);
    return r_reg < r_exact ? x_reg : x;
  }

  Direction direction(const Vector<Scalar> & rd, const Vector<Scalar> & rp, const Vector<Scalar> & s,
                      const Vector<Scalar> & t, const Vector<Scalar> & zl, const Vector<Scalar> & zu,
                      const Vector<Scalar> & rcl, const Vector<Scalar> & rcu) const
  {
    const Index n = p_.H.rows();
    const Index q = p_.A_eq.rows();
    Vector<Scalar> rhs(n + q);
    rhs.head(n) = -rd;
    for (std::size_t i = 0; i < lower_.size(); ++i) {
      const Index k = static_cast<Index>(i);
      rhs(lower_[i]) -= rcl(k) / s(k);
    }
    for (std::size_t i = 0; i < upper_.size(); ++i) {
      const Index k = static_cast<Index>(i);
      rhs(upper_[i]) += rcu(k) / t(k);
    }
    rhs.tail(q) = -rp;
    const Vector<Scalar> x = kkt_solve(rhs);

    Direction d;
    d.dz = x.head(n);
    d.dy = -x.tail(q);
    d.ds.resize(static_cast<Index>(lower_.size()));
    d.dzl.resize(static_cast<Index>(lower_.size()));
    for (std::size_t i = 0; i < lower_.size(); ++i) {
      const Index k = static_cast<Index>(i);
      d.ds(k) = d.dz(lower_[i]);
      d.dzl(k) = (-rcl(k) - zl(k) * d.ds(k)) / s(k);
    }
    d.dt.resize(static_cast<Index>(upper_.size()));
    d.dzu.resize(static_cast<Index>(upper_.size()));
    for (std::size_t i = 0; i < upper_.size(); ++i) {
      const Index k = static_cast<Index>(i);
      d.dt(k) = -d.dz(upper_[i]);
      d.dzu(k) = (-rcu(k) - zu(k) * d.dt(k)) / t(k);
    }
    return d;
  }

  static Scalar max_step(const Vector<Scalar> & v, const Vector<Scalar> & dv)
  {
    Scalar alpha(1);
    for (Index i = 0; i < v.size(); ++i) {
      if (dv(i) < Scalar(0)) {
        alpha = std::min(alpha, -v(i) / dv(i));
      }
    }
    return alpha;
  }

  Scalar step_length(const Vector<Scalar> & s, const Vector<Scalar> & t, const Vector<Scalar> & zl,
                     const Vector<Scalar> & zu, const Direction & d, Scalar fraction) const
  {
    const Scalar a = std::min({max_step(s, d.ds), max_step(t, d.dt), max_step(zl, d.dzl), max_step(zu, d.dzu)});
    return a >= Scalar(1) ? Scalar(1) : fraction * a;
  }

  void finish(QpSolution<Scalar> & sol, const Vector<Scalar> & z, const Vector<Scalar> & y, const Vector<Scalar> & zl,
              const Vector<Scalar> & zu) const
  {
    const Index n = p_.H.rows();
    sol.z = z;
    sol.dual_eq = y;
    sol.dual_lower = Vector<Scalar>::Zero(n);
    sol.dual_upper = Vector<Scalar>::Zero(n);
    for (std::size_t i = 0; i < lower_.size(); ++i) sol.dual_lower(lower_[i]) = zl(static_cast<Index>(i));
    for (std::size_t i = 0; i < upper_.size(); ++i) sol.dual_upper(upper_[i]) = zu(static_cast<Index>(i));
    sol.objective = Scalar(0.5) * z.dot(p_.H * z) + p_.f.dot(z) + p_.objective_offset;
  }

  const QpProblem<Scalar> & p_;
  QpSettings settings_;
  std::vector<Index> lower_;
  std::vector<Index> upper_;
  Scalar data_scale_ = Scalar(1);
  Scalar reg_ = Scalar(0);
  Matrix<Scalar> exact_;
  Eigen::PartialPivLU<Matrix<Scalar>> lu_;
  mutable Eigen::PartialPivLU<Matrix<Scalar>> regularized_lu_;
  mutable bool regularized_ready_ = false;
};

/// Fixed variables (lb == ub) become equality rows so the interior stays nonempty.
template <typename Scalar>
QpProblem<Scalar> fold_fixed_variables(const QpProblem<Scalar> & p, std::vector<Index> & fixed)
{
  constexpr Scalar inf = std::numeric_limits<Scalar>::infinity();
  fixed.clear();
  for (Index i = 0; i < p.H.rows(); ++i) {
    if (p.lb(i) == p.ub(i)) {
      fixed.push_back(i);
    }
  }
  if (fixed.empty()) {
    return p;
  }
  QpProblem<Scalar> out = p;
  const Index q = p.A_eq.rows();
  const Index k = static_cast<Index>(fixed.size());
  out.A_eq.resize(q + k, p.H.rows());
  out.A_eq.topRows(q) = p.A_eq;
  out.A_eq.bottomRows(k).setZero();
  out.b_eq.resize(q + k);
  out.b_eq.head(q) = p.b_eq;
  for (Index j = 0; j < k; ++j) {
    const Index i = fixed[static_cast<std::size_t>(j)];
    out.A_eq(q + j, i) = Scalar(1);
    out.b_eq(q + j) = p.lb(i);
    out.lb(i) = -inf;
    out.ub(i) = inf;
  }
  return out;
}

}  // namespace detail

/**
 * @brief Solve a dense convex QP.
 *
 * Inconsistent constraints are reported through status == Infeasible. An H that is
 * not positive semidefinite, or malformed data, raises InvalidArgument.
 */
template <typename Scalar>
QpSolution<Scalar> solve_qp(const QpProblem<Scalar> & problem, const QpSettings & settings = {})
{
  detail::validate_qp(problem);
  if (settings.check_convexity) {
    detail::check_psd(problem.H);
  }

  QpProblem<Scalar> sym = problem;
  sym.H = Scalar(0.5) * (problem.H + problem.H.transpose());
  std::vector<Index> fixed;
  const QpProblem<Scalar> work = detail::fold_fixed_variables(sym, fixed);
  const Index q0 = problem.A_eq.rows();
  const Scalar tol = static_cast<Scalar>(settings.tol);

  auto restore = [&](QpSolution<Scalar> sol) {
    // Multipliers of folded rows become bound duals.
    if (!fixed.empty()) {
      for (std::size_t j = 0; j < fixed.size(); ++j) {
        const Scalar m = sol.dual_eq(q0 + static_cast<Index>(j));
        (m >= Scalar(0) ? sol.dual_lower : sol.dual_upper)(fixed[j]) = std::abs(m);
      }
      sol.dual_eq.conservativeResize(q0);
    }
    return sol;
  };

  const Scalar inconsistency = detail::equality_inconsistency(work.A_eq, work.b_eq);
  if (inconsistency > std::max(tol, Scalar(1e-9) * (Scalar(1) + detail::max_abs<Scalar>(work.b_eq)))) {
    QpSolution<Scalar> sol;
    sol.status = QpStatus::Infeasible;
    sol.z = Vector<Scalar>::Zero(problem.H.rows());
    sol.dual_eq = Vector<Scalar>::Zero(problem.A_eq.rows());
    sol.dual_lower = Vector<Scalar>::Zero(problem.H.rows());
    sol.dual_upper = Vector<Scalar>::Zero(problem.H.rows());
    sol.objective = std::numeric_limits<Scalar>::quiet_NaN();
    sol.kkt_residual = inconsistency;
    return sol;
  }

  QpSolution<Scalar> sol = detail::InteriorPoint<Scalar>(work, settings).solve();
  if (sol.status == QpStatus::Optimal || work.A_eq.rows() == 0) {
    return restore(std::move(sol));
  }

  // Decide between infeasible and slow convergence: minimize ||A z - b||^2 over the box.
  QpProblem<Scalar> feas = QpProblem<Scalar>::unbounded(work.H.rows());
  feas.H = work.A_eq.transpose() * work.A_eq;
  feas.f = -work.A_eq.transpose() * work.b_eq;
  feas.lb = work.lb;
  feas.ub = work.ub;
  QpSettings feas_settings = settings;
  feas_settings.check_convexity = false;
  feas_settings.max_iter = std::max(settings.max_iter, QpSettings{}.max_iter);
  const QpSolution<Scalar> probe = detail::InteriorPoint<Scalar>(feas, feas_settings).solve();
  const Scalar violation = detail::max_abs<Scalar>(work.A_eq * probe.z - work.b_eq);
  if (probe.status == QpStatus::Optimal && violation > Scalar(1e-6) * (Scalar(1) + detail::max_abs<Scalar>(work.b_eq))) {
    sol.status = QpStatus::Infeasible;
  }
  return restore(std::move(sol));
}

template <typename Scalar>
QpSolution<Scalar> solve_qp(const QpProblem<Scalar> & problem, double tol, int max_iter)
{
  QpSettings settings;
  settings.tol = tol;
  settings.max_iter = max_iter;
  return solve_qp(problem, settings);
}

}  // namespace phidpc
