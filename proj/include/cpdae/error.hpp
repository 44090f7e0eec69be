#pragma once

#include <stdexcept>
#include <string>

namespace cpdae {

// Exit-code mapping for the CLI: usage -> 1, data/contract -> 2, numerical -> 3.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Anything wrong with inputs, shapes or preconditions.
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : ContractError {
    using ContractError::ContractError;
};

// Corpus / file ingestion problems.
struct IngestionError : ContractError {
    using ContractError::ContractError;
};

struct CheckpointError : ContractError {
    using ContractError::ContractError;
};

struct EvalError : ContractError {
    using ContractError::ContractError;
};

// Raised by grad_check when a probe point cannot be evaluated.
struct ProbeError : ContractError {
    using ContractError::ContractError;
};

// NaN/Inf detected, or a training run aborted on a non-finite loss.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace cpdae
