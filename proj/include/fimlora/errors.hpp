#ifndef FIMLORA_ERRORS_HPP
#define FIMLORA_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace fimlora {

/// Operand shapes are incompatible (matmul, adapter inputs, accumulator merges).
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// A forward pass produced NaN/Inf; the message names the offending layer.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Allocation bounds that no integer pattern can satisfy.
struct ConstraintError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// finalize() called on an accumulator that never saw a batch.
struct EmptyCalibrationError : std::logic_error {
    using std::logic_error::logic_error;
};

/// Bad user configuration (unknown enum names, missing fields, bad ranges).
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

}  // namespace fimlora

#endif  // FIMLORA_ERRORS_HPP
