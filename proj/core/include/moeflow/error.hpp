#pragma once

#include <stdexcept>
#include <string>

namespace moeflow {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform.
struct ShapeError : Error {
    using Error::Error;
};

/// A configuration value violates its invariant (e.g. K_r > N_r).
struct ConfigError : Error {
    using Error::Error;
};

/// A caller broke an operation's precondition.
struct ContractError : Error {
    using Error::Error;
};

/// File or directory I/O failure.
struct IoError : Error {
    using Error::Error;
};

/// A numerical oracle produced a non-finite value.
struct OracleError : Error {
    using Error::Error;
};

}  // namespace moeflow
