#pragma once

#include "phidpc/common.hpp"
#include "phidpc/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <vector>

namespace phidpc {

/**
 * @brief Input/output time series recorded from a plant.
 *
 * Samples are stored column-wise: inputs is m x len, outputs is p x len.
 */
template <typename Scalar = double>
class TrajectoryDataset
{
public:
  TrajectoryDataset(Matrix<Scalar> inputs, Matrix<Scalar> outputs, Scalar sample_time)
      : inputs_(std::move(inputs)), outputs_(std::move(outputs)), sample_time_(sample_time)
  {
    detail::require(inputs_.rows() >= 1, "dataset needs at least one input channel");
    detail::require(outputs_.rows() >= 1, "dataset needs at least one output channel");
    detail::require(inputs_.cols() == outputs_.cols(),
                    "inputs and outputs must have the same number of samples (" +
                        std::to_string(inputs_.cols()) + " vs " + std::to_string(outputs_.cols()) + ")");
    detail::require(sample_time_ > Scalar(0), "sample time must be positive");
  }

  const Matrix<Scalar> & inputs() const { return inputs_; }
  const Matrix<Scalar> & outputs() const { return outputs_; }
  Scalar sample_time() const { return sample_time_; }

  Index length() const { return inputs_.cols(); }
  Index input_dim() const { return inputs_.rows(); }
  Index output_dim() const { return outputs_.rows(); }

private:
  Matrix<Scalar> inputs_;
  Matrix<Scalar> outputs_;
  Scalar sample_time_;
};

/**
 * @brief Past window used to initialize a multi-step predictor at time k.
 *
 * u_ini stacks u(k - T_ini) ... u(k - 1); y_ini stacks y(k - T_ini + 1) ... y(k).
 */
template <typename Scalar = double>
struct IniWindow
{
  Vector<Scalar> u_ini;
  Vector<Scalar> y_ini;

  Index t_ini(Index inputs) const { return u_ini.size() / inputs; }

  void check(Index t_ini, Index inputs, Index outputs) const
  {
    detail::require(u_ini.size() == t_ini * inputs,
                    "u_ini has length " + std::to_string(u_ini.size()) + ", expected " +
                        std::to_string(t_ini * inputs));
    detail::require(y_ini.size() == t_ini * outputs,
                    "y_ini has length " + std::to_string(y_ini.size()) + ", expected " +
                        std::to_string(t_ini * outputs));
  }
};

/// Hankel data matrices Up, Yp, Uf, Yf sharing T columns.
template <typename Scalar = double>
struct HankelBlocks
{
  Matrix<Scalar> up;  ///< T_ini*m x T
  Matrix<Scalar> yp;  ///< T_ini*p x T
  Matrix<Scalar> uf;  ///< N*m x T
  Matrix<Scalar> yf;  ///< N*p x T
  Index t_ini = 0;
  Index horizon = 0;

  Index columns() const { return up.cols(); }
  Index input_dim() const { return t_ini > 0 ? up.rows() / t_ini : 0; }
  Index output_dim() const { return t_ini > 0 ? yp.rows() / t_ini : 0; }

  /// [Up; Yp], the arguments of the past-window lifting.
  Matrix<Scalar> past() const
  {
    Matrix<Scalar> out(up.rows() + yp.rows(), columns());
    out << up, yp;
    return out;
  }

  IniWindow<Scalar> window(Index column) const
  {
    return IniWindow<Scalar>{up.col(column), yp.col(column)};
  }
};

struct HankelOptions
{
  /// Requested column count. Fewer than the maximum truncates the tail; more
  /// requires `wrap`, which reads samples modulo the data length.
  std::optional<Index> columns;
  bool wrap = false;
};

/// Smallest data length for which at least (m+p)*T_ini + m*N columns exist.
inline Index minimum_hankel_length(Index inputs, Index outputs, Index t_ini, Index horizon)
{
  return t_ini + horizon + (inputs + outputs) * t_ini + inputs * horizon;
}

/**
 * @brief Build Up, Yp, Uf, Yf from a trajectory.
 *
 * Column j (0-based) holds u(j .. j+T_ini-1), y(j+1 .. j+T_ini), u(j+T_ini .. j+T_ini+N-1)
 * and y(j+T_ini+1 .. j+T_ini+N); the default column count is len - T_ini - N.
 */
template <typename Scalar>
HankelBlocks<Scalar> build_hankel(const TrajectoryDataset<Scalar> & data, Index t_ini, Index horizon,
                                  const HankelOptions & options = {})
{
  detail::require(t_ini >= 1, "T_ini must be positive");
  detail::require(horizon >= 1, "prediction horizon must be positive");

  const Index m = data.input_dim();
  const Index p = data.output_dim();
  const Index len = data.length();
  const Index required = minimum_hankel_length(m, p, t_ini, horizon);
  if (len < required) {
    throw InsufficientData("trajectory has " + std::to_string(len) + " samples; at least " +
                               std::to_string(required) + " are required for T_ini=" +
                               std::to_string(t_ini) + ", N=" + std::to_string(horizon),
                           required);
  }

  const Index maximal = len - t_ini - horizon;
  Index cols = maximal;
  if (options.columns) {
    cols = *options.columns;
    detail::require(cols >= (m + p) * t_ini + m * horizon,
                    "requested column count is below (m+p)*T_ini + m*N");
    detail::require(cols <= maximal || options.wrap,
                    "requested " + std::to_string(cols) + " columns but only " + std::to_string(maximal) +
                        " fit in the data; enable wrap to index cyclically");
  }

  const auto & u = data.inputs();
  const auto & y = data.outputs();
  auto sample = [len](Index k) { return k % len; };

  HankelBlocks<Scalar> blocks;
  blocks.t_ini = t_ini;
  blocks.horizon = horizon;
  blocks.up.resize(t_ini * m, cols);
  blocks.yp.resize(t_ini * p, cols);
  blocks.uf.resize(horizon * m, cols);
  blocks.yf.resize(horizon * p, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < t_ini; ++i) {
      blocks.up.col(j).segment(i * m, m) = u.col(sample(j + i));
      blocks.yp.col(j).segment(i * p, p) = y.col(sample(j + 1 + i));
    }
    for (Index i = 0; i < horizon; ++i) {
      blocks.uf.col(j).segment(i * m, m) = u.col(sample(j + t_ini + i));
      blocks.yf.col(j).segment(i * p, p) = y.col(sample(j + t_ini + 1 + i));
    }
  }
  return blocks;
}

struct MultisineSpec
{
  double lo = -1.0;
  double hi = 1.0;
  Index n_sines = 1;
  double band_lo = 0.0;  ///< fraction of Nyquist
  double band_hi = 1.0;  ///< fraction of Nyquist
  Index period = 100;
  std::uint64_t seed = 0;
};

/**
 * @brief Sum of sinusoids on the DFT grid of one period, rescaled to [lo, hi].
 *
 * Frequencies are integer multiples k of 2*pi/period with k/(period/2) inside the band
 * (k >= 1), spread evenly over the admissible grid; phases are uniform from the seed.
 * The signal is exactly periodic in `period`.
 */
class Multisine
{
public:
  explicit Multisine(const MultisineSpec & spec) : period_(spec.period)
  {
    detail::require(spec.lo < spec.hi, "multisine range must satisfy lo < hi");
    detail::require(spec.n_sines >= 1, "multisine needs at least one sinusoid");
    detail::require(spec.period >= 2 * spec.n_sines, "multisine period must be at least 2 * n_sines");
    detail::require(spec.band_lo >= 0.0 && spec.band_hi <= 1.0 && spec.band_lo < spec.band_hi,
                    "multisine band must satisfy 0 <= lo < hi <= 1");

    const double half = static_cast<double>(spec.period) / 2.0;
    const Index k_lo = std::max<Index>(1, static_cast<Index>(std::ceil(spec.band_lo * half - 1e-12)));
    const Index k_hi = static_cast<Index>(std::floor(spec.band_hi * half + 1e-12));
    const Index grid = k_hi - k_lo + 1;
    detail::require(grid >= spec.n_sines, "band holds " + std::to_string(std::max<Index>(grid, 0)) +
                                              " grid frequencies, fewer than the " +
                                              std::to_string(spec.n_sines) + " requested sinusoids");

    CounterRng rng(spec.seed);
    for (Index i = 0; i < spec.n_sines; ++i) {
      const Index offset =
          spec.n_sines == 1
              ? 0
              : static_cast<Index>(std::llround(static_cast<double>(i) * static_cast<double>(grid - 1) /
                                                static_cast<double>(spec.n_sines - 1)));
      harmonics_.push_back(k_lo + offset);
      phases_.push_back(2.0 * std::numbers::pi * rng.uniform());
    }

    double smin = raw(0);
    double smax = smin;
    for (Index n = 1; n < period_; ++n) {
      const double s = raw(n);
      smin = std::min(smin, s);
      smax = std::max(smax, s);
    }
    detail::require(smax - smin > 1e-12, "multisine realization is constant; choose another seed");
    gain_ = (spec.hi - spec.lo) / (smax - smin);
    offset_ = spec.lo - gain_ * smin;
  }

  double operator()(Index n) const { return offset_ + gain_ * raw(n); }

  Vector<double> sequence() const
  {
    Vector<double> out(period_);
    for (Index n = 0; n < period_; ++n) {
      out(n) = (*this)(n);
    }
    return out;
  }

  const std::vector<Index> & harmonics() const { return harmonics_; }
  const std::vector<double> & phases() const { return phases_; }

private:
  double raw(Index n) const
  {
    const Index wrapped = n % period_;
    double s = 0.0;
    for (std::size_t i = 0; i < harmonics_.size(); ++i) {
      const double arg = 2.0 * std::numbers::pi * static_cast<double>((harmonics_[i] * wrapped) % period_) /
                         static_cast<double>(period_);
      s += std::sin(arg + phases_[i]);
    }
    return s;
  }

  Index period_;
  std::vector<Index> harmonics_;
  std::vector<double> phases_;
  double gain_ = 1.0;
  double offset_ = 0.0;
};

inline Vector<double> multisine(const MultisineSpec & spec) { return Multisine(spec).sequence(); }

/// Adds i.i.d. N(0, std^2) noise to the outputs, sample-major then channel order.
template <typename Scalar>
TrajectoryDataset<Scalar> add_noise(const TrajectoryDataset<Scalar> & data, Scalar std_dev, std::uint64_t seed)
{
  detail::require(std_dev >= Scalar(0), "noise standard deviation must be non-negative");
  Matrix<Scalar> outputs = data.outputs();
  if (std_dev > Scalar(0)) {
    CounterRng rng(seed);
    for (Index k = 0; k < outputs.cols(); ++k) {
      for (Index c = 0; c < outputs.rows(); ++c) {
        outputs(c, k) += std_dev * static_cast<Scalar>(rng.normal());
      }
    }
  }
  return TrajectoryDataset<Scalar>(data.inputs(), std::move(outputs), data.sample_time());
}

}  // namespace phidpc
