#pragma once

#include <stdexcept>
#include <string>

namespace dfq {

/// Inconsistent shapes, geometry, or option values.
class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Checkpoint or sample-batch files that cannot be read back.
class LoadError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A non-finite value appeared where a finite one is required.
class NumericalError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// An operation was called on an object in the wrong lifecycle state.
class StateError : public std::logic_error {
  using std::logic_error::logic_error;
};

/// A caller-side precondition was violated.
class ContractError : public std::logic_error {
  using std::logic_error::logic_error;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

}  // namespace detail
}  // namespace dfq
