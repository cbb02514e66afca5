#pragma once

#include <stdexcept>
#include <string>

namespace prevmap {

// Input or contract violations. The CLI maps these to exit code 2.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numerical failures (non-convergence, factorization breakdown). Exit code 3.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParseError : ValidationError { using ValidationError::ValidationError; };
struct DimensionError : ValidationError { using ValidationError::ValidationError; };
struct CompatibilityError : ValidationError { using ValidationError::ValidationError; };
struct BoundsError : ValidationError { using ValidationError::ValidationError; };
struct DomainError : ValidationError { using ValidationError::ValidationError; };
struct PlacementError : ValidationError { using ValidationError::ValidationError; };
struct UnreachableError : ValidationError { using ValidationError::ValidationError; };
struct PartitionError : ValidationError { using ValidationError::ValidationError; };
struct AggregationError : ValidationError { using ValidationError::ValidationError; };
struct ExtractionError : ValidationError { using ValidationError::ValidationError; };

struct OptimizationError : NumericalError { using NumericalError::NumericalError; };
struct FactorizationError : NumericalError { using NumericalError::NumericalError; };

}  // namespace prevmap
