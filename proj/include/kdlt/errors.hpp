#pragma once

#include <stdexcept>
#include <string>

namespace kdlt {

// Shape or extent disagreement between operands.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Caller violated a documented precondition.
struct ContractError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Object used in a state that forbids the call (e.g. second backward on a tape).
struct StateError : std::logic_error {
    using std::logic_error::logic_error;
};

// Request exceeds a hard size guard.
struct CapacityError : std::length_error {
    using std::length_error::length_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint bytes do not verify (checksum, truncation).
struct CorruptionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint is not in a format this build understands (magic, version).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace kdlt
