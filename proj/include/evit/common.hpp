#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace evit {

enum class Dtype : uint8_t { f32 = 0, f64 = 1 };

inline size_t dtype_size(Dtype dt) { return dt == Dtype::f32 ? 4 : 8; }
inline const char* dtype_name(Dtype dt) { return dt == Dtype::f32 ? "f32" : "f64"; }

// All engine errors derive from EvitError so callers can catch one base.
// The subclasses map onto the failure classes the ops advertise:
//   ShapeError     incompatible or malformed shapes
//   ValueError     bad argument values (negative eps, zero stride, ...)
//   StateError     operation invalid in the current state (backward twice,
//                  train-forward on a folded model, missing gradients)
//   ContractError  caller broke an API contract (non-scalar loss, ...)
//   NumericError   a kernel produced NaN/Inf while finite checks are on
//   IoError        file parsing / serialization problems
struct EvitError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : EvitError {
  using EvitError::EvitError;
};
struct ValueError : EvitError {
  using EvitError::EvitError;
};
struct StateError : EvitError {
  using EvitError::EvitError;
};
struct ContractError : EvitError {
  using EvitError::EvitError;
};
struct NumericError : EvitError {
  using EvitError::EvitError;
};
struct IoError : EvitError {
  using EvitError::EvitError;
};

}  // namespace evit
