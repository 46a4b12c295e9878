#pragma once

#include <stdexcept>
#include <string>

namespace dspreg {

// Exit codes follow the command-line contract: 1 is reserved for failed
// validation checks, usage/protocol problems map to 2, bad data to 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  [[nodiscard]] virtual int exit_code() const noexcept { return 2; }
};

// Tensor or layer shapes do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
  [[nodiscard]] int exit_code() const noexcept override { return 3; }
};

// An API precondition on the caller was violated (e.g. non-scalar loss).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Input values are invalid: labels out of range, non-PSD covariance, empty data.
class DataError : public Error {
 public:
  using Error::Error;
  [[nodiscard]] int exit_code() const noexcept override { return 3; }
};

// Requested computation is not available for this model or head.
class CapabilityError : public Error {
 public:
  using Error::Error;
};

// Experimental protocol violated (too few domains, bad split index).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& where, std::size_t line, const std::string& what)
      : DataError(where + ":" + std::to_string(line) + ": " + what), line_(line) {}
  [[nodiscard]] std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
  [[nodiscard]] int exit_code() const noexcept override { return 3; }
};

}  // namespace dspreg
