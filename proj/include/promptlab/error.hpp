#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace promptlab {

// Invalid shapes, counts or settings. Maps to CLI exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Shape mismatch between operands.
class ShapeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// NaN / undefined numeric result. Maps to CLI exit code 3.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Missing, unreadable or corrupt files. Maps to CLI exit code 4.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

}  // namespace promptlab
