#pragma once

#include "phidpc/common.hpp"
#include "phidpc/control.hpp"
#include "phidpc/random.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

namespace phidpc {

struct PendulumParams
{
  double mass = 1.0;
  double length = 1.0;
  double friction = 0.1;
  double gravity = 9.81;
  double sample_time = 1.0 / 30.0;

  double inertia() const { return mass * length * length / 3.0; }
};

/**
 * @brief Discrete-time damped pendulum driven by a torque.
 *
 *   x1+ = (1 - b Ts / J) x1 + (Ts / J) u - (M L g Ts / (2 J)) sin x2
 *   x2+ = Ts x1 + x2,      y = x2 + w
 *
 * x1 is the angular rate and x2 the angle in radians.
 */
template <typename Scalar = double>
class PendulumPlant
{
public:
  explicit PendulumPlant(PendulumParams params = {}, Vector<Scalar> x0 = Vector<Scalar>::Zero(2))
      : params_(params), x_(std::move(x0))
  {
    detail::require(params_.sample_time > 0.0, "pendulum sample time must be positive");
    detail::require(params_.mass > 0.0 && params_.length > 0.0, "pendulum mass and length must be positive");
    detail::require(x_.size() == 2, "pendulum state has two entries");
  }

  Index input_dim() const { return 1; }
  Index output_dim() const { return 1; }
  Scalar sample_time() const { return static_cast<Scalar>(params_.sample_time); }
  const PendulumParams & params() const { return params_; }
  const Vector<Scalar> & state() const { return x_; }
  void reset(const Vector<Scalar> & x) { x_ = x; }

  Vector<Scalar> output(Scalar noise = Scalar(0)) const
  {
    return Vector<Scalar>::Constant(1, x_(1) + noise);
  }

  void advance(const Vector<Scalar> & u)
  {
    const Scalar ts = static_cast<Scalar>(params_.sample_time);
    const Scalar J = static_cast<Scalar>(params_.inertia());
    const Scalar b = static_cast<Scalar>(params_.friction);
    const Scalar mlg = static_cast<Scalar>(params_.mass * params_.length * params_.gravity);
    const Scalar x1 = (Scalar(1) - b * ts / J) * x_(0) + (ts / J) * u(0) - (mlg * ts / (Scalar(2) * J)) * std::sin(x_(1));
    const Scalar x2 = ts * x_(0) + x_(1);
    x_ << x1, x2;
  }

  /// Measure y(k) = x2(k) + w, then advance the state with u(k).
  Scalar step(Scalar u, Scalar noise = Scalar(0))
  {
    const Scalar y = x_(1) + noise;
    advance(Vector<Scalar>::Constant(1, u));
    return y;
  }

private:
  PendulumParams params_;
  Vector<Scalar> x_;
};

/// x+ = A x + B u, y = C x + w.
template <typename Scalar = double>
class LinearTestPlant
{
public:
  LinearTestPlant(Matrix<Scalar> A, Matrix<Scalar> B, Matrix<Scalar> C, Scalar sample_time = Scalar(1))
      : A_(std::move(A)), B_(std::move(B)), C_(std::move(C)), ts_(sample_time)
  {
    detail::require(A_.rows() == A_.cols(), "A must be square");
    detail::require(B_.rows() == A_.rows() && C_.cols() == A_.rows(), "A, B, C dimensions are inconsistent");
    detail::require(ts_ > Scalar(0), "sample time must be positive");
    x_ = Vector<Scalar>::Zero(A_.rows());
  }

  Index input_dim() const { return B_.cols(); }
  Index output_dim() const { return C_.rows(); }
  Scalar sample_time() const { return ts_; }
  const Vector<Scalar> & state() const { return x_; }
  void reset(const Vector<Scalar> & x) { x_ = x; }
  const Matrix<Scalar> & A() const { return A_; }
  const Matrix<Scalar> & B() const { return B_; }
  const Matrix<Scalar> & C() const { return C_; }

  Vector<Scalar> output(Scalar noise = Scalar(0)) const
  {
    return (C_ * x_).array() + noise;
  }

  void advance(const Vector<Scalar> & u) { x_ = A_ * x_ + B_ * u; }

private:
  Matrix<Scalar> A_, B_, C_;
  Scalar ts_;
  Vector<Scalar> x_;
};

/// Drive a plant with `inputs` (m x len), recording y(k) before each input.
template <typename Plant, typename Scalar = double>
TrajectoryDataset<Scalar> simulate_open_loop(Plant & plant, const Matrix<Scalar> & inputs)
{
  detail::require(inputs.rows() == plant.input_dim(), "input sequence has the wrong number of channels");
  Matrix<Scalar> outputs(plant.output_dim(), inputs.cols());
  for (Index k = 0; k < inputs.cols(); ++k) {
    outputs.col(k) = plant.output();
    plant.advance(inputs.col(k));
  }
  return TrajectoryDataset<Scalar>(inputs, std::move(outputs), plant.sample_time());
}

/// r(k) = sin(2 pi F k Ts) for k = 0 .. floor(duration / Ts).
inline Vector<double> reference_sinusoid(double frequency, double duration, double sample_time)
{
  detail::require(frequency > 0.0, "reference frequency must be positive");
  detail::require(duration >= 0.0, "reference duration must be non-negative");
  detail::require(sample_time > 0.0, "reference sample time must be positive");
  const Index count = static_cast<Index>(std::floor(duration / sample_time + 1e-9)) + 1;
  Vector<double> r(count);
  for (Index k = 0; k < count; ++k) {
    r(k) = std::sin(2.0 * std::numbers::pi * frequency * static_cast<double>(k) * sample_time);
  }
  return r;
}

struct MetricsReport
{
  double j_ise = 0.0;
  double j_iae = 0.0;
  double j_u = 0.0;
  double j_track = 0.0;
  double mean_cpu = 0.0;  ///< seconds per QP solve
  Index steps = 0;
};

/**
 * @brief Running sums behind the tracking metrics.
 *
 * Adding samples one at a time or in chunks gives identical results, since the sums
 * are formed in sample order either way.
 */
class MetricsAccumulator
{
public:
  MetricsAccumulator(Matrix<double> Q, Matrix<double> R) : Q_(std::move(Q)), R_(std::move(R)) {}

  void add(const Vector<double> & y, const Vector<double> & r, const Vector<double> & u, const Vector<double> & u_ref,
           double solve_seconds = 0.0)
  {
    detail::require(y.size() == Q_.rows() && r.size() == y.size(), "output sample does not match Q");
    detail::require(u.size() == R_.rows() && u_ref.size() == u.size(), "input sample does not match R");
    const Vector<double> e = y - r;
    const Vector<double> du = u - u_ref;
    ise_ += e.squaredNorm();
    iae_ += e.cwiseAbs().sum();
    ju_ += u.cwiseAbs().sum();
    track_ += e.dot(Q_ * e) + du.dot(R_ * du);
    cpu_ += solve_seconds;
    ++n_;
  }

  Index count() const { return n_; }

  MetricsReport report() const
  {
    MetricsReport m;
    m.steps = n_;
    if (n_ == 0) {
      return m;
    }
    const double n = static_cast<double>(n_);
    m.j_ise = ise_ / n;
    m.j_iae = iae_ / n;
    m.j_u = ju_ / n;
    m.j_track = track_ / n;
    m.mean_cpu = cpu_ / n;
    return m;
  }

private:
  Matrix<double> Q_, R_;
  double ise_ = 0.0, iae_ = 0.0, ju_ = 0.0, track_ = 0.0, cpu_ = 0.0;
  Index n_ = 0;
};

/// Per-step closed-loop record; column k of each matrix is time step k.
struct ClosedLoopLog
{
  double sample_time = 1.0;
  Matrix<double> u;  ///< m x steps
  Matrix<double> y;  ///< p x steps, measured
  Matrix<double> r;  ///< p x steps
  std::vector<double> objective;
  std::vector<QpStatus> status;
  std::vector<double> solve_seconds;
  std::vector<std::string> warnings;  ///< one entry per fallback, prefixed by the step

  Index steps() const { return u.cols(); }
};

/**
 * @brief J_ISE, J_IAE, J_u, J_track averaged over the log; mean_cpu over its solve times.
 *
 * An empty u_ref means zero.
 */
inline MetricsReport compute_metrics(const ClosedLoopLog & log, const Matrix<double> & Q, const Matrix<double> & R,
                                     const Matrix<double> & u_ref = {})
{
  detail::require(log.steps() > 0, "closed-loop log is empty");
  MetricsAccumulator acc(Q, R);
  for (Index k = 0; k < log.steps(); ++k) {
    const Vector<double> ur = u_ref.size() == 0 ? Vector<double>::Zero(log.u.rows()) : Vector<double>(u_ref.col(k));
    const double cpu = static_cast<std::size_t>(k) < log.solve_seconds.size() ? log.solve_seconds[static_cast<std::size_t>(k)] : 0.0;
    acc.add(log.y.col(k), log.r.col(k), log.u.col(k), ur, cpu);
  }
  return acc.report();
}

/// Apply `inputs` (m x T_ini) from the plant's current state; returns the outputs measured before each input.
template <typename Plant>
Matrix<double> warm_up(Plant & plant, const Matrix<double> & inputs, double noise_std, CounterRng & rng)
{
  Matrix<double> outputs(plant.output_dim(), inputs.cols());
  for (Index k = 0; k < inputs.cols(); ++k) {
    outputs.col(k) = plant.output(noise_std * rng.normal());
    plant.advance(inputs.col(k));
  }
  return outputs;
}

struct ClosedLoopOptions
{
  double noise_std = 0.0;
  std::uint64_t seed = 0;
};

/**
 * @brief Run `steps` receding-horizon steps from a primed controller.
 *
 * `reference` is p x len with r(k) in column k; at step k the controller tracks
 * r(k+1 .. k+N), holding the last column past the end. Measurement noise comes from
 * a CounterRng seeded with options.seed (std 0 draws nothing).
 */
template <typename Plant>
ClosedLoopLog run_closed_loop(Plant & plant, PredictiveController<double> & controller,
                              const Matrix<double> & reference, Index steps, const ClosedLoopOptions & options = {},
                              CounterRng * noise_rng = nullptr)
{
  detail::require(steps >= 0, "step count must be non-negative");
  detail::require(reference.rows() == plant.output_dim() && reference.cols() >= 1,
                  "reference must have one row per output and at least one sample");
  detail::require(options.noise_std >= 0.0, "noise standard deviation must be non-negative");
  const Index N = controller.spec().horizon();
  const Index p = plant.output_dim();
  const Index m = plant.input_dim();

  CounterRng local(options.seed);
  CounterRng & rng = noise_rng ? *noise_rng : local;
  auto ref_at = [&](Index k) { return reference.col(std::min(k, reference.cols() - 1)); };

  ClosedLoopLog log;
  log.sample_time = plant.sample_time();
  log.u.resize(m, steps);
  log.y.resize(p, steps);
  log.r.resize(p, steps);
  for (Index k = 0; k < steps; ++k) {
    const double w = options.noise_std > 0.0 ? options.noise_std * rng.normal() : 0.0;
    const Vector<double> y = plant.output(w);
    HorizonReference<double> ref;
    ref.y.resize(N * p);
    for (Index i = 0; i < N; ++i) {
      ref.y.segment(i * p, p) = ref_at(k + 1 + i);
    }
    const StepResult<double> res = controller.step(y, ref);
    plant.advance(res.u);

    log.u.col(k) = res.u;
    log.y.col(k) = y;
    log.r.col(k) = ref_at(k);
    log.objective.push_back(res.objective);
    log.status.push_back(res.status);
    log.solve_seconds.push_back(res.solve_seconds);
    if (res.fallback) {
      log.warnings.push_back("step " + std::to_string(k) + ": " + res.warning);
    }
  }
  return log;
}

}  // namespace phidpc
