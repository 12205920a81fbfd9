#pragma once

#include <stdexcept>
#include <string>

namespace diffuq {

// Configuration or argument errors detected before any compute starts.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes that do not line up (layer widths, parameter counts, input sizes).
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf states, divergence, and other failures of the numerics.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Problems with ingested data files.
class DataError : public std::runtime_error {
 public:
  enum class Kind { missing_value, non_numeric, empty_split, bad_column, io };

  DataError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace diffuq
