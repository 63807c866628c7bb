#pragma once

#include <stdexcept>
#include <string>

namespace qdiff {

/// Base class for every error raised by the library. `category()` is a short
/// machine-readable tag used by the CLI error line.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* category() const noexcept { return "error"; }
};

/// Shapes of two clouds (or a cloud and a permutation) disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "dimension"; }
};

/// An argument lies outside the mathematical domain (t <= 0, s >= t, ...).
class DomainError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "domain"; }
};

/// Exact enumeration over S_N was requested above the configured cap.
class CapacityError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "capacity"; }
};

/// Malformed input text (point-cloud files, checkpoints, config).
class ParseError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "parse"; }
};

/// Training loss exceeded the divergence threshold.
class DivergenceError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "divergence"; }
};

/// A user-supplied score callback threw during reverse integration.
class CallbackError : public Error {
 public:
  CallbackError(std::size_t step, const std::string& what)
      : Error("score callback failed at step " + std::to_string(step) + ": " + what), step_(step) {}
  const char* category() const noexcept override { return "callback"; }
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace qdiff
