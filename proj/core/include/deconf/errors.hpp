#pragma once

#include <stdexcept>
#include <string>

namespace deconf {

// Base class for everything this library throws on purpose.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration or argument values (bounds, unknown keys, missing inputs).
struct config_error : error {
    using error::error;
};

// Array dimensions do not conform.
struct shape_error : error {
    using error::error;
};

// Malformed input file; message carries file, line and column where known.
struct parse_error : error {
    using error::error;
};

// A structural invariant of a data object was violated (e.g. mixed shapes).
struct invariant_error : error {
    using error::error;
};

// Training produced a non-finite value; message names the parameter or epoch.
struct divergence_error : error {
    using error::error;
};

// A statistic was requested on too few samples.
struct insufficient_data_error : error {
    using error::error;
};

// Checkpoint file is truncated, malformed, or declares a different model.
struct checkpoint_error : error {
    using error::error;
};

}  // namespace deconf
