#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace epk {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument violates a documented precondition (shape, range, empty input).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of a function (e.g. erf_inv(1)).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Malformed file. Carries the byte offset at which parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// A non-finite value appeared where finite arithmetic was required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss. `last_good_step` indexes the last finite checkpoint.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, std::size_t last_good_step)
      : Error(what), last_good_step_(last_good_step) {}
  std::size_t last_good_step() const noexcept { return last_good_step_; }

 private:
  std::size_t last_good_step_;
};

/// A training path cannot support the requested kernel computation.
class InvalidPath : public Error {
 public:
  using Error::Error;
};

/// Loss derivative varies along the path, so the single-kernel reduction does not hold.
class ReductionInvalid : public Error {
 public:
  using Error::Error;
};

}  // namespace epk
