#pragma once

#include <stdexcept>
#include <string>

namespace enkf {

// Error taxonomy shared by all modules. Every throw site uses one of these
// so callers can distinguish usage errors from numerical degeneracies.

struct EnkfError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// numerics
struct NotPositiveDefinite : EnkfError { using EnkfError::EnkfError; };
struct DimensionMismatch   : EnkfError { using EnkfError::EnkfError; };

// covariance
struct InsufficientMembers : EnkfError { using EnkfError::EnkfError; };
struct BandwidthOutOfRange : EnkfError { using EnkfError::EnkfError; };
struct OddTaperWidth       : EnkfError { using EnkfError::EnkfError; };
struct GenerationFailed    : EnkfError { using EnkfError::EnkfError; };

// filters
struct InnovationCovarianceNotPD : EnkfError { using EnkfError::EnkfError; };
struct DegenerateLikelihood      : EnkfError { using EnkfError::EnkfError; };
struct ModelBlewUp               : EnkfError { using EnkfError::EnkfError; };
struct Diverged                  : EnkfError { using EnkfError::EnkfError; };

// models
struct DimensionTooSmall : EnkfError { using EnkfError::EnkfError; };
struct NonFiniteState    : EnkfError { using EnkfError::EnkfError; };
struct CflViolation      : EnkfError { using EnkfError::EnkfError; };

// observations
struct InvalidIndices : EnkfError { using EnkfError::EnkfError; };

// experiments / io
struct IoError    : EnkfError { using EnkfError::EnkfError; };
struct ParseError : EnkfError { using EnkfError::EnkfError; };

} // namespace enkf
