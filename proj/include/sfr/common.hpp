#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

// The library is compiled twice: the default float build used for training and
// checkpoints, and a double build (SFR_DOUBLE) linked only into the
// finite-difference gradient checks. Each build lives in its own inline
// namespace so both can be linked into the same binary.
#ifdef SFR_DOUBLE
#define SFR_BEGIN_NAMESPACE \
  namespace sfr {           \
  inline namespace f64 {
#else
#define SFR_BEGIN_NAMESPACE \
  namespace sfr {           \
  inline namespace f32 {
#endif
#define SFR_END_NAMESPACE \
  }                       \
  }

SFR_BEGIN_NAMESPACE

#ifdef SFR_DOUBLE
using Scalar = double;
#else
using Scalar = float;
#endif

// Error taxonomy. Each maps onto one of the error kinds named by the
// operation contracts; the CLI maps them onto exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
  using Error::Error;
};
struct DegenerateError : Error {
  using Error::Error;
};
struct StateError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

SFR_END_NAMESPACE
