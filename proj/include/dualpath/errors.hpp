#pragma once

#include <stdexcept>
#include <string>

namespace dualpath {

// Shape or dimension mismatch between operands.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Mathematical domain violation (log of a non-positive value, ...).
struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

// Inconsistent model, train or budget configuration.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Bad user input: out-of-vocab tokens, empty corpora, bad ablation specs.
struct InputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Malformed file (checkpoint, trace, tag file).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A function evaluation produced NaN or Inf.
struct EvaluationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
    TrainingError(const std::string& what, long step)
        : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step(step) {}
    long step;
};

}  // namespace dualpath
