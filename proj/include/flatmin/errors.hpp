#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace flatmin {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Raised when a loss, gradient or update becomes non-finite. `step()` is the
// 1-based optimizer iteration when known, otherwise -1.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what, std::int64_t step = -1)
      : Error(step >= 0 ? what + " (at step " + std::to_string(step) + ")" : what), step_(step) {}

  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

class DegenerateDirectionError : public Error {
 public:
  using Error::Error;
};

class BatchSizeError : public Error {
 public:
  using Error::Error;
};

class BudgetError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

}  // namespace flatmin
