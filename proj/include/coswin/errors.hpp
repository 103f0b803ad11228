#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace coswin {

// Base for everything thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor dimension mismatches.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Violated API preconditions (non-scalar loss, bad axis, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid model or training configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Dataset files: missing, truncated, or malformed.
class DataError : public Error {
 public:
  using Error::Error;
};

// Checkpoint files: bad magic, version, or record shapes.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

// A forward op produced NaN/Inf, or gradients went non-finite.
class NumericError : public Error {
 public:
  using Error::Error;
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

}  // namespace coswin
