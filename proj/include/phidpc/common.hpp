#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <type_traits>

namespace phidpc {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Read-only vector argument; the scalar type is not deduced from it.
template <typename Scalar>
using ConstVectorRef = const std::type_identity_t<Eigen::Ref<const Vector<Scalar>>> &;

/// Base class of every error raised by the library.
class Error : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

/// Wrong argument shape, out-of-range parameter or violated precondition.
class InvalidArgument : public Error
{
public:
  using Error::Error;
};

/// A trajectory is too short for the requested Hankel layout.
class InsufficientData : public InvalidArgument
{
public:
  InsufficientData(const std::string & what, Index required)
      : InvalidArgument(what), required_length(required)
  {}

  Index required_length;
};

/// A matrix that must be invertible (or of full row rank) is not.
class RankDeficient : public Error
{
public:
  using Error::Error;
};

namespace detail {

inline void require(bool condition, const std::string & message)
{
  if (!condition) {
    throw InvalidArgument(message);
  }
}

inline std::string shape(Index rows, Index cols)
{
  return std::to_string(rows) + "x" + std::to_string(cols);
}

}  // namespace detail

}  // namespace phidpc
