#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ukf {

// Dimension / shape mismatch between tensors or rasters.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration value (grid sizes, stage divisibility, specs).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API contract violation (backward on non-scalar, missing grad, ...).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Mask value outside the documented {0, 1} label set.
struct LabelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Input resolution does not match a resolution-bound parameter block.
struct ResolutionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite value detected where finiteness is guaranteed.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File-format or filesystem problem.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

inline int64_t numel_of(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

// UKF_CHECK_FINITE=1 turns on NaN/Inf assertions after every kernel.
inline bool check_finite_enabled() {
  static const bool enabled = [] {
    const char* v = std::getenv("UKF_CHECK_FINITE");
    return v != nullptr && v[0] == '1';
  }();
  return enabled;
}

template <typename T>
void assert_finite(const std::vector<T>& data, const char* op_name) {
  if (!check_finite_enabled()) return;
  for (size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(static_cast<double>(data[i]))) {
      throw NumericError(std::string(op_name) + ": non-finite value at flat index " +
                         std::to_string(i));
    }
  }
}

}  // namespace ukf
