#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace deduce {

/// Base of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid hyperparameters or arguments (n < m + 2, empty loss mask, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed caller input. `position` is the offending character or token
/// index when one exists, otherwise npos.
class InputError : public Error {
 public:
  explicit InputError(const std::string& what, std::size_t position = npos)
      : Error(what), position_(position) {}
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

/// Dataset generation could not reach the requested size.
class GenerationError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss, SVD failure and similar numerical breakdowns.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// A file that exists but does not follow its declared layout.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

}  // namespace deduce
