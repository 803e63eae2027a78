#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace upinn {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN or Inf produced where a finite value is required.
struct NonFiniteError : Error {
  using Error::Error;
};

// Argument outside the mathematical domain of an operation (log of a
// non-positive value, implicit check outside (0,1), ...).
struct DomainError : Error {
  using Error::Error;
};

// A Var was combined with a Var from a different graph or from a graph
// generation that has since been reset.
struct GenerationError : Error {
  using Error::Error;
};

// Differentiating a graph that already holds derivative nodes.
struct UnsupportedOrderError : Error {
  using Error::Error;
};

struct DimensionError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

// Training aborted because the loss or a gradient became non-finite.
struct NumericalAbort : Error {
  NumericalAbort(std::size_t epoch, const std::string& what)
      : Error("numerical abort at epoch " + std::to_string(epoch) + ": " + what), epoch(epoch) {}
  std::size_t epoch;
};

}  // namespace upinn
