#pragma once

#include "phidpc/common.hpp"
#include "phidpc/random.hpp"
#include "phidpc/signal.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

namespace phidpc {

enum class BasisKind { RbfGaussian, Chebyshev, IdentityLinear };

/// AffineInFutureInputs: phi_bar(u_ini, y_ini, u_f) = col(phi_K(u_ini, y_ini), u_f).
enum class BasisStructure { AffineInFutureInputs, General };

/// Affine per-coordinate map x -> (x - offset) .* scale; empty means identity.
template <typename Scalar = double>
struct InputScaling
{
  Vector<Scalar> offset;
  Vector<Scalar> scale;

  bool empty() const { return offset.size() == 0; }

  Vector<Scalar> apply(ConstVectorRef<Scalar> x) const
  {
    if (empty()) {
      return x;
    }
    return (x - offset).cwiseProduct(scale);
  }
};

template <typename Scalar = double>
struct BasisSet
{
  BasisKind kind = BasisKind::IdentityLinear;
  BasisStructure structure = BasisStructure::AffineInFutureInputs;
  Index t_ini = 1;
  Index horizon = 1;
  Index inputs = 1;   ///< m
  Index outputs = 1;  ///< p
  bool includes_bias = true;
  /// Pass the (unscaled) lifting argument through as linear features.
  bool include_window = false;
  InputScaling<Scalar> scaling;

  // rbf-gaussian
  Matrix<Scalar> centers;  ///< argument_dim x K
  Scalar width = Scalar(1);

  // chebyshev
  std::vector<int> channel_orders;  ///< max order per channel (m inputs, then p outputs)
  int max_total_degree = 0;
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> exponents;  ///< argument_dim x K

  Index window_dim() const { return t_ini * (inputs + outputs); }
  Index future_dim() const { return horizon * inputs; }

  /// Dimension of the argument of the nonlinear features.
  Index argument_dim() const
  {
    return structure == BasisStructure::AffineInFutureInputs ? window_dim() : window_dim() + future_dim();
  }

  Index feature_count() const
  {
    switch (kind) {
      case BasisKind::RbfGaussian: return centers.cols();
      case BasisKind::Chebyshev: return exponents.cols();
      case BasisKind::IdentityLinear: return 0;
    }
    return 0;
  }

  /// Entries of phi_bar that do not depend linearly-and-only on u_f: bias, window, features.
  Index lifted_dim() const
  {
    const bool linear = kind == BasisKind::IdentityLinear || include_window;
    return (includes_bias ? 1 : 0) + (linear ? argument_dim() : 0) + feature_count();
  }

  /// L + 1.
  Index size() const
  {
    return lifted_dim() + (structure == BasisStructure::AffineInFutureInputs ? future_dim() : 0);
  }

  bool affine() const { return structure == BasisStructure::AffineInFutureInputs; }

  /// Channel index (0..m+p-1) of coordinate i of col(u_ini, y_ini[, u_f]).
  Index channel_of(Index i) const
  {
    const Index nu = t_ini * inputs;
    const Index ny = t_ini * outputs;
    if (i < nu) {
      return i % inputs;
    }
    if (i < nu + ny) {
      return inputs + (i - nu) % outputs;
    }
    return (i - nu - ny) % inputs;
  }
};

namespace detail {

template <typename Scalar>
void check_basis_dims(const BasisSet<Scalar> & basis)
{
  require(basis.t_ini >= 1 && basis.horizon >= 1 && basis.inputs >= 1 && basis.outputs >= 1,
          "basis dimensions must be positive");
  if (!basis.scaling.empty()) {
    require(basis.scaling.offset.size() == basis.argument_dim() &&
                basis.scaling.scale.size() == basis.argument_dim(),
            "input scaling must have one entry per argument coordinate");
  }
}

/// Graded multi-indices with per-coordinate caps and a total-degree cap, zero index excluded.
inline Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> graded_exponents(const std::vector<int> & caps,
                                                                           int total)
{
  const Index d = static_cast<Index>(caps.size());
  std::vector<std::vector<int>> found;
  std::vector<int> current(static_cast<std::size_t>(d), 0);
  for (int degree = 1; degree <= total; ++degree) {
    // Enumerate compositions of `degree` into d parts respecting caps, lexicographically.
    auto recurse = [&](auto && self, Index pos, int remaining) -> void {
      if (pos == d - 1) {
        if (remaining <= caps[static_cast<std::size_t>(pos)]) {
          current[static_cast<std::size_t>(pos)] = remaining;
          found.push_back(current);
        }
        return;
      }
      const int cap = std::min(remaining, caps[static_cast<std::size_t>(pos)]);
      for (int a = cap; a >= 0; --a) {
        current[static_cast<std::size_t>(pos)] = a;
        self(self, pos + 1, remaining - a);
      }
      current[static_cast<std::size_t>(pos)] = 0;
    };
    if (d > 0) {
      recurse(recurse, 0, degree);
    }
  }
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> out(d, static_cast<Index>(found.size()));
  for (std::size_t k = 0; k < found.size(); ++k) {
    for (Index i = 0; i < d; ++i) {
      out(i, static_cast<Index>(k)) = found[k][static_cast<std::size_t>(i)];
    }
  }
  return out;
}

}  // namespace detail

inline constexpr double default_rbf_width_value = 0.70710678118654752440;

/// Width for which exp(-||z-c||^2 / (2 sigma^2)) == exp(-||z-c||^2).
template <typename Scalar = double>
Scalar default_rbf_width(const Matrix<Scalar> & centers)
{
  detail::require(centers.cols() >= 1, "at least one RBF center is required");
  return static_cast<Scalar>(default_rbf_width_value);
}

/// col(1, u_ini, y_ini, u_f) (bias optional): the linear DeePC regressor.
template <typename Scalar = double>
BasisSet<Scalar> identity_basis(Index t_ini, Index horizon, Index inputs, Index outputs, bool bias = true)
{
  BasisSet<Scalar> basis;
  basis.kind = BasisKind::IdentityLinear;
  basis.structure = BasisStructure::AffineInFutureInputs;
  basis.t_ini = t_ini;
  basis.horizon = horizon;
  basis.inputs = inputs;
  basis.outputs = outputs;
  basis.includes_bias = bias;
  detail::check_basis_dims(basis);
  return basis;
}

struct RbfOptions
{
  BasisStructure structure = BasisStructure::AffineInFutureInputs;
  /// Defaults to false for affine structure and true otherwise.
  std::optional<bool> includes_bias;
  bool include_window = false;
};

template <typename Scalar = double>
BasisSet<Scalar> rbf_basis(Index t_ini, Index horizon, Index inputs, Index outputs, Matrix<Scalar> centers,
                           Scalar width, const RbfOptions & options = {},
                           InputScaling<Scalar> scaling = {})
{
  BasisSet<Scalar> basis;
  basis.kind = BasisKind::RbfGaussian;
  basis.structure = options.structure;
  basis.t_ini = t_ini;
  basis.horizon = horizon;
  basis.inputs = inputs;
  basis.outputs = outputs;
  basis.includes_bias = options.includes_bias.value_or(options.structure == BasisStructure::General);
  basis.include_window = options.include_window;
  basis.scaling = std::move(scaling);
  basis.centers = std::move(centers);
  basis.width = width;
  detail::check_basis_dims(basis);
  detail::require(width > Scalar(0), "RBF width must be positive");
  detail::require(basis.centers.cols() >= 1, "at least one RBF center is required");
  detail::require(basis.centers.rows() == basis.argument_dim(),
                  "RBF centers have dimension " + std::to_string(basis.centers.rows()) + ", expected " +
                      std::to_string(basis.argument_dim()));
  return basis;
}

struct ChebyshevOptions
{
  BasisStructure structure = BasisStructure::AffineInFutureInputs;
  std::optional<bool> includes_bias;
  bool include_window = false;
  /// Defaults to the largest channel order.
  std::optional<int> max_total_degree;
};

/**
 * @brief Products of Chebyshev polynomials T_a(x_i) over the scaled argument.
 *
 * Coordinate i may use orders up to the order of its channel; the sum of orders in a
 * product is capped by the total degree. `scaling` maps the training range to [-1, 1].
 */
template <typename Scalar = double>
BasisSet<Scalar> chebyshev_basis(Index t_ini, Index horizon, Index inputs, Index outputs,
                                 std::vector<int> channel_orders, InputScaling<Scalar> scaling,
                                 const ChebyshevOptions & options = {})
{
  BasisSet<Scalar> basis;
  basis.kind = BasisKind::Chebyshev;
  basis.structure = options.structure;
  basis.t_ini = t_ini;
  basis.horizon = horizon;
  basis.inputs = inputs;
  basis.outputs = outputs;
  basis.includes_bias = options.includes_bias.value_or(options.structure == BasisStructure::General);
  basis.include_window = options.include_window;
  basis.scaling = std::move(scaling);
  detail::check_basis_dims(basis);
  detail::require(static_cast<Index>(channel_orders.size()) == inputs + outputs,
                  "Chebyshev basis needs one order per channel");
  for (int order : channel_orders) {
    detail::require(order >= 0, "Chebyshev orders must be non-negative");
  }
  basis.channel_orders = std::move(channel_orders);
  basis.max_total_degree =
      options.max_total_degree.value_or(*std::max_element(basis.channel_orders.begin(), basis.channel_orders.end()));
  std::vector<int> caps(static_cast<std::size_t>(basis.argument_dim()));
  for (Index i = 0; i < basis.argument_dim(); ++i) {
    caps[static_cast<std::size_t>(i)] = basis.channel_orders[static_cast<std::size_t>(basis.channel_of(i))];
  }
  basis.exponents = detail::graded_exponents(caps, basis.max_total_degree);
  detail::require(basis.exponents.cols() >= 1, "Chebyshev orders produce no basis functions");
  return basis;
}

/// Per-channel min/max map of the training arguments (columns of `points`) onto [-1, 1].
template <typename Scalar = double>
InputScaling<Scalar> minmax_scaling(const BasisSet<Scalar> & layout, const Matrix<Scalar> & points)
{
  detail::require(points.rows() == layout.argument_dim(), "scaling points have the wrong dimension");
  const Index channels = layout.inputs + layout.outputs;
  Vector<Scalar> lo = Vector<Scalar>::Constant(channels, std::numeric_limits<Scalar>::infinity());
  Vector<Scalar> hi = Vector<Scalar>::Constant(channels, -std::numeric_limits<Scalar>::infinity());
  for (Index i = 0; i < points.rows(); ++i) {
    const Index c = layout.channel_of(i);
    lo(c) = std::min(lo(c), points.row(i).minCoeff());
    hi(c) = std::max(hi(c), points.row(i).maxCoeff());
  }
  InputScaling<Scalar> scaling;
  scaling.offset.resize(points.rows());
  scaling.scale.resize(points.rows());
  for (Index i = 0; i < points.rows(); ++i) {
    const Index c = layout.channel_of(i);
    const Scalar span = hi(c) - lo(c);
    scaling.offset(i) = (hi(c) + lo(c)) / Scalar(2);
    scaling.scale(i) = span > Scalar(0) ? Scalar(2) / span : Scalar(1);
  }
  return scaling;
}

/// Nonlinear features of the (already assembled) argument.
template <typename Scalar>
Vector<Scalar> eval_features(const BasisSet<Scalar> & basis, ConstVectorRef<Scalar> argument)
{
  const Vector<Scalar> x = basis.scaling.apply(argument);
  Vector<Scalar> out(basis.feature_count());
  switch (basis.kind) {
    case BasisKind::RbfGaussian: {
      const Scalar denom = Scalar(2) * basis.width * basis.width;
      for (Index l = 0; l < basis.centers.cols(); ++l) {
        out(l) = std::exp(-(x - basis.centers.col(l)).squaredNorm() / denom);
      }
      break;
    }
    case BasisKind::Chebyshev: {
      const int top = basis.exponents.size() > 0 ? basis.exponents.maxCoeff() : 0;
      Matrix<Scalar> table(x.size(), top + 1);
      for (Index i = 0; i < x.size(); ++i) {
        table(i, 0) = Scalar(1);
        if (top >= 1) {
          table(i, 1) = x(i);
        }
        for (int n = 2; n <= top; ++n) {
          table(i, n) = Scalar(2) * x(i) * table(i, n - 1) - table(i, n - 2);
        }
      }
      for (Index l = 0; l < basis.exponents.cols(); ++l) {
        Scalar prod(1);
        for (Index i = 0; i < x.size(); ++i) {
          const int a = basis.exponents(i, l);
          if (a > 0) {
            prod *= table(i, a);
          }
        }
        out(l) = prod;
      }
      break;
    }
    case BasisKind::IdentityLinear: break;
  }
  return out;
}

/// phi_K(u_ini, y_ini): the part of phi_bar preceding u_f for an affine basis.
template <typename Scalar>
Vector<Scalar> eval_lifting(const BasisSet<Scalar> & basis, ConstVectorRef<Scalar> window)
{
  detail::require(basis.affine(), "eval_lifting needs an affine-in-future-inputs basis");
  detail::require(window.size() == basis.window_dim(),
                  "window has length " + std::to_string(window.size()) + ", expected " +
                      std::to_string(basis.window_dim()));
  Vector<Scalar> out(basis.lifted_dim());
  Index row = 0;
  if (basis.includes_bias) {
    out(row++) = Scalar(1);
  }
  if (basis.kind == BasisKind::IdentityLinear || basis.include_window) {
    out.segment(row, window.size()) = window;
    row += window.size();
  }
  if (basis.feature_count() > 0) {
    out.segment(row, basis.feature_count()) = eval_features(basis, window);
  }
  return out;
}

template <typename Scalar>
Vector<Scalar> eval_lifting(const BasisSet<Scalar> & basis, const IniWindow<Scalar> & window)
{
  window.check(basis.t_ini, basis.inputs, basis.outputs);
  Vector<Scalar> z(basis.window_dim());
  z << window.u_ini, window.y_ini;
  return eval_lifting(basis, z);
}

/// phi_bar(u_ini, y_ini, u_f).
template <typename Scalar>
Vector<Scalar> eval_basis(const BasisSet<Scalar> & basis, ConstVectorRef<Scalar> u_ini,
                          ConstVectorRef<Scalar> y_ini,
                          ConstVectorRef<Scalar> u_f)
{
  detail::require(u_ini.size() == basis.t_ini * basis.inputs,
                  "u_ini has length " + std::to_string(u_ini.size()) + ", expected " +
                      std::to_string(basis.t_ini * basis.inputs));
  detail::require(y_ini.size() == basis.t_ini * basis.outputs,
                  "y_ini has length " + std::to_string(y_ini.size()) + ", expected " +
                      std::to_string(basis.t_ini * basis.outputs));
  detail::require(u_f.size() == basis.future_dim(),
                  "u_f has length " + std::to_string(u_f.size()) + ", expected " +
                      std::to_string(basis.future_dim()));

  Vector<Scalar> out(basis.size());
  if (basis.affine()) {
    Vector<Scalar> z(basis.window_dim());
    z << u_ini, y_ini;
    out << eval_lifting(basis, z), u_f;
    return out;
  }

  Vector<Scalar> x(basis.argument_dim());
  x << u_ini, y_ini, u_f;
  Index row = 0;
  if (basis.includes_bias) {
    out(row++) = Scalar(1);
  }
  if (basis.kind == BasisKind::IdentityLinear || basis.include_window) {
    out.segment(row, x.size()) = x;
    row += x.size();
  }
  if (basis.feature_count() > 0) {
    out.segment(row, basis.feature_count()) = eval_features(basis, x);
  }
  return out;
}

/// Phi = phi_bar applied to every column of [Up; Yp; Uf].
template <typename Scalar = double>
struct LiftedDataMatrix
{
  Matrix<Scalar> phi;
  BasisSet<Scalar> basis;
  Vector<Scalar> singular_values;  ///< descending
  Scalar rank_tolerance = Scalar(1e-10);
  bool row_rank_ok = false;

  Index rows() const { return phi.rows(); }
  Index cols() const { return phi.cols(); }
};

template <typename Scalar>
LiftedDataMatrix<Scalar> build_phi(const BasisSet<Scalar> & basis, const HankelBlocks<Scalar> & blocks,
                                   Scalar rank_tolerance = Scalar(1e-10))
{
  detail::require(blocks.t_ini == basis.t_ini && blocks.horizon == basis.horizon &&
                      blocks.input_dim() == basis.inputs && blocks.output_dim() == basis.outputs,
                  "Hankel blocks (T_ini=" + std::to_string(blocks.t_ini) + ", N=" + std::to_string(blocks.horizon) +
                      ") do not match the basis (T_ini=" + std::to_string(basis.t_ini) +
                      ", N=" + std::to_string(basis.horizon) + ")");
  LiftedDataMatrix<Scalar> lifted;
  lifted.basis = basis;
  lifted.rank_tolerance = rank_tolerance;
  lifted.phi.resize(basis.size(), blocks.columns());
  for (Index j = 0; j < blocks.columns(); ++j) {
    lifted.phi.col(j) = eval_basis<Scalar>(basis, blocks.up.col(j), blocks.yp.col(j), blocks.uf.col(j));
  }
  lifted.singular_values = Eigen::BDCSVD<Matrix<Scalar>>(lifted.phi).singularValues();
  const Index r = lifted.singular_values.size();
  lifted.row_rank_ok = r == lifted.phi.rows() && r > 0 &&
                       lifted.singular_values(r - 1) > rank_tolerance * lifted.singular_values(0);
  return lifted;
}

/**
 * @brief Lloyd's k-means with k-means++ seeding from a CounterRng.
 *
 * Points are the columns of `points`. Empty clusters are re-seeded with the point
 * farthest from its current center. Returns the d x k matrix of cluster means.
 */
template <typename Scalar = double>
Matrix<Scalar> kmeans_centers(const Matrix<Scalar> & points, Index k, std::uint64_t seed, Index max_iter = 300)
{
  const Index d = points.rows();
  const Index n = points.cols();
  detail::require(k >= 1, "k must be positive");
  detail::require(max_iter >= 1, "max_iter must be positive");

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  std::sort(order.begin(), order.end(), [&](Index a, Index b) {
    for (Index i = 0; i < d; ++i) {
      if (points(i, a) != points(i, b)) {
        return points(i, a) < points(i, b);
      }
    }
    return false;
  });
  Index distinct = n > 0 ? 1 : 0;
  for (Index i = 1; i < n; ++i) {
    if (points.col(order[static_cast<std::size_t>(i)]) != points.col(order[static_cast<std::size_t>(i - 1)])) {
      ++distinct;
    }
  }
  detail::require(k <= distinct, "k=" + std::to_string(k) + " exceeds the " + std::to_string(distinct) +
                                     " distinct points");

  CounterRng rng(seed);
  Matrix<Scalar> centers(d, k);
  centers.col(0) = points.col(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
  Vector<Scalar> dist2(n);
  for (Index j = 0; j < n; ++j) {
    dist2(j) = (points.col(j) - centers.col(0)).squaredNorm();
  }
  for (Index c = 1; c < k; ++c) {
    const Scalar total = dist2.sum();
    const Scalar target = static_cast<Scalar>(rng.uniform()) * total;
    Scalar acc(0);
    Index pick = -1;
    for (Index j = 0; j < n; ++j) {
      if (dist2(j) <= Scalar(0)) {
        continue;
      }
      acc += dist2(j);
      pick = j;
      if (acc > target) {
        break;
      }
    }
    centers.col(c) = points.col(pick);
    for (Index j = 0; j < n; ++j) {
      dist2(j) = std::min(dist2(j), (points.col(j) - centers.col(c)).squaredNorm());
    }
  }

  std::vector<Index> label(static_cast<std::size_t>(n), -1);
  for (Index iter = 0; iter < max_iter; ++iter) {
    bool changed = false;
    for (Index j = 0; j < n; ++j) {
      Index best = 0;
      Scalar best_d = (points.col(j) - centers.col(0)).squaredNorm();
      for (Index c = 1; c < k; ++c) {
        const Scalar dc = (points.col(j) - centers.col(c)).squaredNorm();
        if (dc < best_d) {
          best_d = dc;
          best = c;
        }
      }
      if (label[static_cast<std::size_t>(j)] != best) {
        label[static_cast<std::size_t>(j)] = best;
        changed = true;
      }
    }

    // Empty clusters take the point farthest from its own center.
    std::vector<Index> count(static_cast<std::size_t>(k), 0);
    for (Index j = 0; j < n; ++j) {
      ++count[static_cast<std::size_t>(label[static_cast<std::size_t>(j)])];
    }
    for (Index c = 0; c < k; ++c) {
      if (count[static_cast<std::size_t>(c)] > 0) {
        continue;
      }
      Index far = -1;
      Scalar far_d(-1);
      for (Index j = 0; j < n; ++j) {
        const Index own = label[static_cast<std::size_t>(j)];
        if (count[static_cast<std::size_t>(own)] <= 1) {
          continue;
        }
        const Scalar dj = (points.col(j) - centers.col(own)).squaredNorm();
        if (dj > far_d) {
          far_d = dj;
          far = j;
        }
      }
      --count[static_cast<std::size_t>(label[static_cast<std::size_t>(far)])];
      label[static_cast<std::size_t>(far)] = c;
      count[static_cast<std::size_t>(c)] = 1;
      changed = true;
    }

    centers.setZero();
    for (Index j = 0; j < n; ++j) {
      centers.col(label[static_cast<std::size_t>(j)]) += points.col(j);
    }
    for (Index c = 0; c < k; ++c) {
      centers.col(c) /= static_cast<Scalar>(count[static_cast<std::size_t>(c)]);
    }
    if (!changed) {
      break;
    }
  }
  return centers;
}

}  // namespace phidpc
