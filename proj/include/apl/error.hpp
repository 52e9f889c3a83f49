#pragma once

#include <stdexcept>
#include <string>

namespace apl {

// Error taxonomy shared across the library. The CLI maps these onto its
// exit-code contract (2 config, 3 I/O, 4 numeric).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape-incompatible operands; the message names both shapes.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf produced by a forward op, or a diverged optimization.
struct NumericFault : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Misuse of the computation graph (non-scalar root, repeated backward, ...).
struct GraphError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace apl
