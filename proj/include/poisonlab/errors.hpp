#pragma once

#include <stdexcept>
#include <string>

namespace poisonlab {

// Error taxonomy mirrors the CLI exit codes: config errors exit 2,
// stage/input errors exit 3, numeric errors exit 4.

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or constraint-violating configuration (file, field, or flag).
struct ConfigError : Error {
    using Error::Error;
};

// Caller handed an operation unusable data (empty corpus, single-class labels, ...).
struct InputError : Error {
    using Error::Error;
};

// Tensor shape disagreement.
struct DimensionError : Error {
    using Error::Error;
};

// Sequence does not fit the model context.
struct LengthError : Error {
    using Error::Error;
};

// An operation's stated precondition was violated.
struct ContractError : Error {
    using Error::Error;
};

// NaN/Inf surfaced; the current operation aborts rather than propagating.
struct NumericError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Wraps a failure with the pipeline stage it happened in.
struct StageError : Error {
    StageError(const std::string& stage, const std::string& what)
        : Error("[stage:" + stage + "] " + what), stage_name(stage) {}
    std::string stage_name;
};

}  // namespace poisonlab
