#pragma once

#include "phidpc/basis.hpp"
#include "phidpc/common.hpp"
#include "phidpc/qp.hpp"
#include "phidpc/regress.hpp"
#include "phidpc/signal.hpp"

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include <chrono>
#include <deque>
#include <limits>
#include <memory>
#include <optional>
#include <string>

namespace phidpc {

/// Stage cost ||y - y_r||_Q^2 + ||u - u_r||_R^2 summed over the horizon.
template <typename Scalar = double>
struct CostSpec
{
  Matrix<Scalar> Q;  ///< p x p, PSD
  Matrix<Scalar> R;  ///< m x m, PSD
  /// Weight on y(N); defaults to Q.
  std::optional<Matrix<Scalar>> terminal_weight;

  static CostSpec scalar(Scalar q, Scalar r, Index outputs = 1, Index inputs = 1)
  {
    CostSpec c;
    c.Q = q * Matrix<Scalar>::Identity(outputs, outputs);
    c.R = r * Matrix<Scalar>::Identity(inputs, inputs);
    return c;
  }
};

/// Per-channel boxes, repeated over the horizon. Empty vectors mean unbounded.
template <typename Scalar = double>
struct ConstraintSpec
{
  Vector<Scalar> u_lower;
  Vector<Scalar> u_upper;
  Vector<Scalar> y_lower;
  Vector<Scalar> y_upper;
};

/// Stacked references over the horizon: y(1..N) and u(0..N-1). Empty u means zero.
template <typename Scalar = double>
struct HorizonReference
{
  Vector<Scalar> y;
  Vector<Scalar> u;
};

enum class Formulation { Spc, DeePC, DeePCR1, DeePCR2, RidgeDeePC, KoopmanMpc };

inline const char * to_string(Formulation f)
{
  switch (f) {
    case Formulation::Spc: return "phi-spc";
    case Formulation::DeePC: return "phi-deepc";
    case Formulation::DeePCR1: return "phi-deepc-r1";
    case Formulation::DeePCR2: return "phi-deepc-r2";
    case Formulation::RidgeDeePC: return "ridge-phi-deepc";
    case Formulation::KoopmanMpc: return "koopman-mpc";
  }
  return "unknown";
}

/**
 * @brief Lifted linear model z+ = A z + B u, y = C z on the lifting of a past window.
 *
 * psi and gamma are the stacked prediction matrices y(1..N) = psi z(0) + gamma u(0..N-1).
 */
template <typename Scalar = double>
struct KoopmanModel
{
  Matrix<Scalar> A;
  Matrix<Scalar> B;
  Matrix<Scalar> C;
  BasisSet<Scalar> basis;
  Matrix<Scalar> psi;
  Matrix<Scalar> gamma;
  Scalar state_residual = Scalar(0);   ///< ||Z+ - A Z - B U||_F
  Scalar output_residual = Scalar(0);  ///< ||Y - C Z||_F

  Index lifted_dim() const { return A.rows(); }
  Index horizon() const { return basis.horizon; }
};

template <typename Scalar = double>
struct ControllerSpec
{
  Formulation formulation = Formulation::Spc;
  Scalar lambda = Scalar(0);  ///< R1 / R2 regularization weight
  Scalar gamma = Scalar(0);   ///< ridge damping
  CostSpec<Scalar> cost;
  ConstraintSpec<Scalar> constraints;
  std::shared_ptr<const IdentifiedPredictor<Scalar>> predictor;
  std::shared_ptr<const KoopmanModel<Scalar>> koopman;

  const BasisSet<Scalar> & basis() const
  {
    if (formulation == Formulation::KoopmanMpc) {
      detail::require(koopman != nullptr, "Koopman MPC needs a fitted Koopman model");
      return koopman->basis;
    }
    detail::require(predictor != nullptr, std::string(to_string(formulation)) + " needs an identified predictor");
    return predictor->basis();
  }

  Index horizon() const { return basis().horizon; }
  Index t_ini() const { return basis().t_ini; }
  Index inputs() const { return basis().inputs; }
  Index outputs() const { return basis().outputs; }
};

namespace detail {

template <typename Scalar>
void check_weight(const Matrix<Scalar> & W, Index n, const char * name)
{
  require(W.rows() == n && W.cols() == n, std::string(name) + " must be " + shape(n, n) + ", got " +
                                              shape(W.rows(), W.cols()));
  const Scalar scale = std::max(Scalar(1), W.cwiseAbs().maxCoeff());
  require((W - W.transpose()).cwiseAbs().maxCoeff() <= Scalar(1e-12) * scale,
          std::string(name) + " must be symmetric");
  Matrix<Scalar> shifted = W;
  shifted.diagonal().array() += Scalar(1e-12) * scale;
  require(Eigen::LLT<Matrix<Scalar>>(shifted).info() == Eigen::Success,
          std::string(name) + " must be positive semidefinite");
}

template <typename Scalar>
void check_spec(const ControllerSpec<Scalar> & spec, Formulation expected)
{
  require(spec.formulation == expected, std::string("controller spec is ") + to_string(spec.formulation) +
                                            ", expected " + to_string(expected));
  const BasisSet<Scalar> & basis = spec.basis();
  require(basis.affine(), "controllers need a basis that is affine in the future inputs; a general basis "
                          "makes the problem a nonlinear program");
  check_weight(spec.cost.Q, basis.outputs, "Q");
  check_weight(spec.cost.R, basis.inputs, "R");
  if (spec.cost.terminal_weight) {
    check_weight(*spec.cost.terminal_weight, basis.outputs, "terminal weight");
  }
  if (expected == Formulation::DeePCR1 || expected == Formulation::DeePCR2) {
    require(spec.lambda > Scalar(0), "lambda must be positive");
  }
  if (expected == Formulation::RidgeDeePC) {
    require(spec.gamma > Scalar(0), "gamma must be positive");
  }
}

/// col(phi_K(window), 0): the window-dependent part of phi_bar.
template <typename Scalar>
Vector<Scalar> lifting_constant(const BasisSet<Scalar> & basis, const IniWindow<Scalar> & window)
{
  Vector<Scalar> c = Vector<Scalar>::Zero(basis.size());
  c.head(basis.lifted_dim()) = eval_lifting(basis, window);
  return c;
}

/**
 * Tracking cost and boxes over the leading (y, u) block; `extra` trailing variables
 * get zero cost and no bounds. The offset makes the objective equal the true cost.
 */
template <typename Scalar>
QpProblem<Scalar> tracking_qp(const ControllerSpec<Scalar> & spec, const HorizonReference<Scalar> & ref,
                              Index extra)
{
  const Index N = spec.horizon();
  const Index m = spec.inputs();
  const Index p = spec.outputs();
  const Index ny = N * p;
  const Index nu = N * m;
  require(ref.y.size() == ny, "output reference has length " + std::to_string(ref.y.size()) + ", expected " +
                                  std::to_string(ny));
  require(ref.u.size() == 0 || ref.u.size() == nu,
          "input reference has length " + std::to_string(ref.u.size()) + ", expected " + std::to_string(nu));
  const Vector<Scalar> ur = ref.u.size() == 0 ? Vector<Scalar>::Zero(nu) : ref.u;

  QpProblem<Scalar> qp = QpProblem<Scalar>::unbounded(ny + nu + extra);
  const Matrix<Scalar> & terminal = spec.cost.terminal_weight ? *spec.cost.terminal_weight : spec.cost.Q;
  for (Index i = 0; i < N; ++i) {
    const Matrix<Scalar> & Qi = i + 1 == N ? terminal : spec.cost.Q;
    qp.H.block(i * p, i * p, p, p) = Scalar(2) * Qi;
    qp.f.segment(i * p, p) = Scalar(-2) * Qi * ref.y.segment(i * p, p);
    qp.objective_offset += ref.y.segment(i * p, p).dot(Qi * ref.y.segment(i * p, p));
    qp.H.block(ny + i * m, ny + i * m, m, m) = Scalar(2) * spec.cost.R;
    qp.f.segment(ny + i * m, m) = Scalar(-2) * spec.cost.R * ur.segment(i * m, m);
    qp.objective_offset += ur.segment(i * m, m).dot(spec.cost.R * ur.segment(i * m, m));
  }

  auto apply = [&](const Vector<Scalar> & lo, const Vector<Scalar> & hi, Index start, Index width, const char * what) {
    if (lo.size() == 0 && hi.size() == 0) {
      return;
    }
    require((lo.size() == 0 || lo.size() == width) && (hi.size() == 0 || hi.size() == width),
            std::string(what) + " bounds need one entry per channel");
    for (Index i = 0; i < N; ++i) {
      if (lo.size()) qp.lb.segment(start + i * width, width) = lo;
      if (hi.size()) qp.ub.segment(start + i * width, width) = hi;
    }
  };
  apply(spec.constraints.y_lower, spec.constraints.y_upper, 0, p, "output");
  apply(spec.constraints.u_lower, spec.constraints.u_upper, ny, m, "input");
  return qp;
}

}  // namespace detail

/// phi-SPC over (y, u): y = Theta col(phi_K(window), u).
template <typename Scalar>
QpProblem<Scalar> compile_spc(const ControllerSpec<Scalar> & spec, const IniWindow<Scalar> & window,
                              const HorizonReference<Scalar> & ref)
{
  detail::check_spec(spec, Formulation::Spc);
  const auto & pred = *spec.predictor;
  const BasisSet<Scalar> & basis = pred.basis();
  const Index ny = basis.horizon * basis.outputs;
  const Index nu = basis.future_dim();
  const Vector<Scalar> c = detail::lifting_constant(basis, window);

  QpProblem<Scalar> qp = detail::tracking_qp(spec, ref, 0);
  qp.A_eq.resize(ny, ny + nu);
  qp.A_eq << Matrix<Scalar>::Identity(ny, ny), -pred.theta.rightCols(nu);
  qp.b_eq = pred.theta * c;
  return qp;
}

/// Unregularized phi-DeePC over (y, u, g): Phi g = col(phi_K, u), Yf g = y.
template <typename Scalar>
QpProblem<Scalar> compile_deepc(const ControllerSpec<Scalar> & spec, const IniWindow<Scalar> & window,
                                const HorizonReference<Scalar> & ref)
{
  detail::check_spec(spec, Formulation::DeePC);
  const auto & pred = *spec.predictor;
  const BasisSet<Scalar> & basis = pred.basis();
  const Index ny = basis.horizon * basis.outputs;
  const Index nu = basis.future_dim();
  const Index rows = basis.size();
  const Index T = pred.phi().cols();

  QpProblem<Scalar> qp = detail::tracking_qp(spec, ref, T);
  qp.A_eq = Matrix<Scalar>::Zero(rows + ny, ny + nu + T);
  qp.A_eq.block(rows - nu, ny, nu, nu) = -Matrix<Scalar>::Identity(nu, nu);
  qp.A_eq.block(0, ny + nu, rows, T) = pred.phi();
  qp.A_eq.block(rows, 0, ny, ny) = -Matrix<Scalar>::Identity(ny, ny);
  qp.A_eq.block(rows, ny + nu, ny, T) = pred.yf;
  qp.b_eq = Vector<Scalar>::Zero(rows + ny);
  qp.b_eq.head(rows) = detail::lifting_constant(basis, window);
  return qp;
}

/// phi-DeePC plus lambda ||g - Phi^+ col(phi_K, u)||^2, expanded over (g, u).
template <typename Scalar>
QpProblem<Scalar> compile_deepc_r1(const ControllerSpec<Scalar> & spec, const IniWindow<Scalar> & window,
                                   const HorizonReference<Scalar> & ref)
{
  detail::check_spec(spec, Formulation::DeePCR1);
  ControllerSpec<Scalar> plain = spec;
  plain.formulation = Formulation::DeePC;
  QpProblem<Scalar> qp = compile_deepc(plain, window, ref);

  const auto & pred = *spec.predictor;
  const BasisSet<Scalar> & basis = pred.basis();
  const Index ny = basis.horizon * basis.outputs;
  const Index nu = basis.future_dim();
  const Index T = pred.phi().cols();
  const Scalar lam = spec.lambda;

  const Vector<Scalar> pc = pred.phi_pinv * detail::lifting_constant(basis, window);
  const auto ps = pred.phi_pinv.rightCols(nu);  // T x Nm

  qp.H.block(ny + nu, ny + nu, T, T).diagonal().array() += Scalar(2) * lam;
  qp.H.block(ny + nu, ny, T, nu) -= Scalar(2) * lam * ps;
  qp.H.block(ny, ny + nu, nu, T) -= Scalar(2) * lam * ps.transpose();
  qp.H.block(ny, ny, nu, nu) += Scalar(2) * lam * (ps.transpose() * ps);
  qp.f.segment(ny + nu, T) -= Scalar(2) * lam * pc;
  qp.f.segment(ny, nu) += Scalar(2) * lam * (ps.transpose() * pc);
  qp.objective_offset += lam * pc.squaredNorm();
  return qp;
}

/// phi-DeePC-R2 over (y, u, g_hat): Phi g_hat = 0, y = Yf (Phi^+ col(phi_K, u) + g_hat), cost + lambda ||g_hat||^2.
template <typename Scalar>
QpProblem<Scalar> compile_deepc_r2(const ControllerSpec<Scalar> & spec, const IniWindow<Scalar> & window,
                                   const HorizonReference<Scalar> & ref)
{
  detail::check_spec(spec, Formulation::DeePCR2);
  const auto & pred = *spec.predictor;
  const BasisSet<Scalar> & basis = pred.basis();
  const Index ny = basis.horizon * basis.outputs;
  const Index nu = basis.future_dim();
  const Index rows = basis.size();
  const Index T = pred.phi().cols();

  const Vector<Scalar> pc = pred.phi_pinv * detail::lifting_constant(basis, window);

  QpProblem<Scalar> qp = detail::tracking_qp(spec, ref, T);
  qp.H.block(ny + nu, ny + nu, T, T).diagonal().array() += Scalar(2) * spec.lambda;
  qp.A_eq = Matrix<Scalar>::Zero(rows + ny, ny + nu + T);
  qp.A_eq.block(0, ny + nu, rows, T) = pred.phi();
  qp.A_eq.block(rows, 0, ny, ny) = -Matrix<Scalar>::Identity(ny, ny);
  qp.A_eq.block(rows, ny, ny, nu) = pred.yf * pred.phi_pinv.rightCols(nu);
  qp.A_eq.block(rows, ny + nu, ny, T) = pred.yf;
  qp.b_eq = Vector<Scalar>::Zero(rows + ny);
  qp.b_eq.tail(ny) = -(pred.yf * pc);
  return qp;
}

/// Ridge phi-DeePC over (y, u, g in R^{L+1}): (Phi Phi^T + gamma I) g = col(phi_K, u), Yf Phi^T g = y.
template <typename Scalar>
QpProblem<Scalar> compile_ridge_deepc(const ControllerSpec<Scalar> & spec, const IniWindow<Scalar> & window,
                                      const HorizonReference<Scalar> & ref)
{
  detail::check_spec(spec, Formulation::RidgeDeePC);
  const auto & pred = *spec.predictor;
  const BasisSet<Scalar> & basis = pred.basis();
  const Index ny = basis.horizon * basis.outputs;
  const Index nu = basis.future_dim();
  const Index rows = basis.size();

  Matrix<Scalar> gram = pred.phi() * pred.phi().transpose();
  gram.diagonal().array() += spec.gamma;

  QpProblem<Scalar> qp = detail::tracking_qp(spec, ref, rows);
  qp.A_eq = Matrix<Scalar>::Zero(rows + ny, ny + nu + rows);
  qp.A_eq.block(rows - nu, ny, nu, nu) = -Matrix<Scalar>::Identity(nu, nu);
  qp.A_eq.block(0, ny + nu, rows, rows) = gram;
  qp.A_eq.block(rows, 0, ny, ny) = -Matrix<Scalar>::Identity(ny, ny);
  qp.A_eq.block(rows, ny + nu, ny, rows) = pred.yf * pred.phi().transpose();
  qp.b_eq = Vector<Scalar>::Zero(rows + ny);
  qp.b_eq.head(rows) = detail::lifting_constant(basis, window);
  return qp;
}

/**
 * @brief EDMD fit of a lifted linear model from consecutive Hankel columns.
 *
 * Snapshot j pairs the window of column j with the window of column j+1 and the
 * input u(j+T_ini) applied in between. Regressor rows that are identically zero
 * (for instance an unexcited input channel) get zero coefficients. Without damping
 * any other rank deficiency raises RankDeficient.
 */
template <typename Scalar>
KoopmanModel<Scalar> fit_koopman(const HankelBlocks<Scalar> & blocks, const BasisSet<Scalar> & basis,
                                 Scalar damping = Scalar(0))
{
  detail::require(basis.affine(), "Koopman lifting needs a basis that is affine in the future inputs");
  detail::require(blocks.t_ini == basis.t_ini && blocks.input_dim() == basis.inputs &&
                      blocks.output_dim() == basis.outputs,
                  "Hankel blocks do not match the lifting dimensions");
  detail::require(damping >= Scalar(0), "damping must be non-negative");
  const Index T = blocks.columns();
  detail::require(T >= 2, "Koopman fit needs at least two Hankel columns");
  const Index m = basis.inputs;
  const Index p = basis.outputs;
  const Index nz = basis.lifted_dim();
  const Index snaps = T - 1;

  Matrix<Scalar> Z(nz, T);
  for (Index j = 0; j < T; ++j) {
    Vector<Scalar> w(basis.window_dim());
    w << blocks.up.col(j), blocks.yp.col(j);
    Z.col(j) = eval_lifting(basis, w);
  }
  Matrix<Scalar> W(nz + m, snaps);
  W.topRows(nz) = Z.leftCols(snaps);
  W.bottomRows(m) = blocks.uf.topRows(m).leftCols(snaps);
  const Matrix<Scalar> Zn = Z.rightCols(snaps);
  const Matrix<Scalar> Y = blocks.yp.bottomRows(p).leftCols(snaps);

  // Least squares X = target * R^+ restricted to nonzero regressor rows.
  auto regress = [&](const Matrix<Scalar> & target, const Matrix<Scalar> & R, const char * what) {
    std::vector<Index> active;
    for (Index i = 0; i < R.rows(); ++i) {
      if (R.row(i).cwiseAbs().maxCoeff() > Scalar(0)) {
        active.push_back(i);
      }
    }
    Matrix<Scalar> X = Matrix<Scalar>::Zero(target.rows(), R.rows());
    if (active.empty()) {
      return X;
    }
    Matrix<Scalar> Ra(static_cast<Index>(active.size()), R.cols());
    for (std::size_t k = 0; k < active.size(); ++k) {
      Ra.row(static_cast<Index>(k)) = R.row(active[k]);
    }
    Matrix<Scalar> Xa;
    if (damping > Scalar(0)) {
      Matrix<Scalar> gram = Ra * Ra.transpose();
      gram.diagonal().array() += damping;
      Xa = Eigen::LLT<Matrix<Scalar>>(gram).solve(Ra * target.transpose()).transpose();
    } else {
      Eigen::BDCSVD<Matrix<Scalar>> svd(Ra.transpose(), Eigen::ComputeThinU | Eigen::ComputeThinV);
      const auto & sv = svd.singularValues();
      if (sv.size() < Ra.rows() || sv(sv.size() - 1) <= Scalar(1e-10) * sv(0)) {
        throw RankDeficient(std::string("Koopman ") + what +
                            " snapshot Gram matrix is rank deficient; set a positive damping");
      }
      Xa = svd.solve(target.transpose()).transpose();
    }
    for (std::size_t k = 0; k < active.size(); ++k) {
      X.col(active[k]) = Xa.col(static_cast<Index>(k));
    }
    return X;
  };

  KoopmanModel<Scalar> model;
  model.basis = basis;
  const Matrix<Scalar> AB = regress(Zn, W, "state");
  model.A = AB.leftCols(nz);
  model.B = AB.rightCols(m);
  model.C = regress(Y, W.topRows(nz), "output");
  model.state_residual = (Zn - AB * W).norm();
  model.output_residual = (Y - model.C * W.topRows(nz)).norm();

  const Index N = basis.horizon;
  model.psi.resize(N * p, nz);
  model.gamma = Matrix<Scalar>::Zero(N * p, N * m);
  Matrix<Scalar> cak = model.C;  // C A^k, starting at k = 0
  std::vector<Matrix<Scalar>> markov;  // C A^k B
  for (Index i = 0; i < N; ++i) {
    markov.push_back(cak * model.B);
    cak = cak * model.A;
    model.psi.middleRows(i * p, p) = cak;
  }
  for (Index i = 0; i < N; ++i) {
    for (Index j = 0; j <= i; ++j) {
      model.gamma.block(i * p, j * m, p, m) = markov[static_cast<std::size_t>(i - j)];
    }
  }
  return model;
}

/// Koopman MPC over (y, u): y = Psi phi_K(window) + Gamma u.
template <typename Scalar>
QpProblem<Scalar> compile_koopman_mpc(const KoopmanModel<Scalar> & model, const ControllerSpec<Scalar> & spec,
                                      const IniWindow<Scalar> & window, const HorizonReference<Scalar> & ref)
{
  detail::require(spec.formulation == Formulation::KoopmanMpc, "controller spec is not koopman-mpc");
  detail::check_weight(spec.cost.Q, model.basis.outputs, "Q");
  detail::check_weight(spec.cost.R, model.basis.inputs, "R");
  ControllerSpec<Scalar> bound = spec;
  if (bound.koopman.get() != &model) {
    bound.koopman = std::shared_ptr<const KoopmanModel<Scalar>>(std::shared_ptr<const KoopmanModel<Scalar>>(), &model);
  }
  const Index ny = model.psi.rows();
  const Index nu = model.gamma.cols();
  QpProblem<Scalar> qp = detail::tracking_qp(bound, ref, 0);
  qp.A_eq.resize(ny, ny + nu);
  qp.A_eq << Matrix<Scalar>::Identity(ny, ny), -model.gamma;
  qp.b_eq = model.psi * eval_lifting(model.basis, window);
  return qp;
}

template <typename Scalar>
QpProblem<Scalar> compile_controller(const ControllerSpec<Scalar> & spec, const IniWindow<Scalar> & window,
                                     const HorizonReference<Scalar> & ref)
{
  switch (spec.formulation) {
    case Formulation::Spc: return compile_spc(spec, window, ref);
    case Formulation::DeePC: return compile_deepc(spec, window, ref);
    case Formulation::DeePCR1: return compile_deepc_r1(spec, window, ref);
    case Formulation::DeePCR2: return compile_deepc_r2(spec, window, ref);
    case Formulation::RidgeDeePC: return compile_ridge_deepc(spec, window, ref);
    case Formulation::KoopmanMpc:
      detail::require(spec.koopman != nullptr, "Koopman MPC needs a fitted Koopman model");
      return compile_koopman_mpc(*spec.koopman, spec, window, ref);
  }
  throw InvalidArgument("unknown formulation");
}

enum class FallbackPolicy { HoldPreviousInput, Throw };

template <typename Scalar = double>
struct StepResult
{
  Vector<Scalar> u;            ///< applied input u(k)
  Vector<Scalar> predicted_y;  ///< y(1..N | k) from the QP
  Scalar objective = Scalar(0);
  QpStatus status = QpStatus::Optimal;
  Index iterations = 0;
  double solve_seconds = 0.0;
  bool fallback = false;
  std::string warning;
};

/**
 * @brief Receding-horizon wrapper around a compiled formulation.
 *
 * Holds u(k-T_ini .. k-1) and y(k-T_ini .. k-1) between calls. step() appends the new
 * measurement y(k), solves, applies the first planned input and shifts the input window.
 */
template <typename Scalar = double>
class PredictiveController
{
public:
  explicit PredictiveController(ControllerSpec<Scalar> spec, QpSettings settings = {},
                                FallbackPolicy policy = FallbackPolicy::HoldPreviousInput)
      : spec_(std::move(spec)), settings_(settings), policy_(policy)
  {
    (void)spec_.basis();
  }

  const ControllerSpec<Scalar> & spec() const { return spec_; }

  /// Past inputs (m x T_ini) and outputs (p x T_ini), oldest column first.
  void prime(const Matrix<Scalar> & inputs, const Matrix<Scalar> & outputs)
  {
    const Index t = spec_.t_ini();
    detail::require(inputs.rows() == spec_.inputs() && inputs.cols() == t,
                    "prime needs an " + detail::shape(spec_.inputs(), t) + " input history");
    detail::require(outputs.rows() == spec_.outputs() && outputs.cols() == t,
                    "prime needs a " + detail::shape(spec_.outputs(), t) + " output history");
    u_hist_.clear();
    y_hist_.clear();
    for (Index k = 0; k < t; ++k) {
      u_hist_.push_back(inputs.col(k));
      y_hist_.push_back(outputs.col(k));
    }
  }

  bool primed() const { return !u_hist_.empty(); }

  /// Window as it will be used at the next step once `y_now` is measured.
  IniWindow<Scalar> window_with(const Vector<Scalar> & y_now) const
  {
    const Index t = spec_.t_ini();
    const Index m = spec_.inputs();
    const Index p = spec_.outputs();
    IniWindow<Scalar> w{Vector<Scalar>(t * m), Vector<Scalar>(t * p)};
    for (Index k = 0; k < t; ++k) {
      w.u_ini.segment(k * m, m) = u_hist_[static_cast<std::size_t>(k)];
    }
    for (Index k = 0; k + 1 < t; ++k) {
      w.y_ini.segment(k * p, p) = y_hist_[static_cast<std::size_t>(k + 1)];
    }
    w.y_ini.tail(p) = y_now;
    return w;
  }

  const std::deque<Vector<Scalar>> & input_history() const { return u_hist_; }
  const std::deque<Vector<Scalar>> & output_history() const { return y_hist_; }

  StepResult<Scalar> step(const Vector<Scalar> & y_now, const HorizonReference<Scalar> & ref)
  {
    detail::require(primed(), "controller must be primed before stepping");
    detail::require(y_now.size() == spec_.outputs(), "measurement has the wrong dimension");
    const IniWindow<Scalar> w = window_with(y_now);
    const QpProblem<Scalar> qp = compile_controller(spec_, w, ref);

    const auto start = std::chrono::steady_clock::now();
    const QpSolution<Scalar> sol = solve_qp(qp, settings_);
    const auto stop = std::chrono::steady_clock::now();

    const Index ny = spec_.horizon() * spec_.outputs();
    const Index m = spec_.inputs();
    StepResult<Scalar> out;
    out.status = sol.status;
    out.iterations = sol.iterations;
    out.solve_seconds = std::chrono::duration<double>(stop - start).count();
    out.objective = sol.objective;
    out.predicted_y = sol.z.head(ny);
    if (sol.optimal()) {
      out.u = sol.z.segment(ny, m);
    } else {
      out.warning = std::string("QP ") + to_string(sol.status) + " at this step";
      if (policy_ == FallbackPolicy::Throw) {
        throw Error(out.warning);
      }
      out.fallback = true;
      out.u = u_hist_.back();
      out.warning += "; holding the previous input";
    }

    y_hist_.pop_front();
    y_hist_.push_back(y_now);
    u_hist_.pop_front();
    u_hist_.push_back(out.u);
    return out;
  }

private:
  ControllerSpec<Scalar> spec_;
  QpSettings settings_;
  FallbackPolicy policy_;
  std::deque<Vector<Scalar>> u_hist_;
  std::deque<Vector<Scalar>> y_hist_;
};

}  // namespace phidpc
