#pragma once

#include <stdexcept>
#include <string>

namespace icl {

// Shape disagreement between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Token id, target, or label outside its valid range.
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// A precondition of an operation was violated by the caller.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// NaN or Inf produced by an operation.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// HeadAddress or layer that does not exist in the model.
struct AddressError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Checkpoint could not be restored.
struct LoadError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Not enough items to sample a prompt or a head set.
struct SamplingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Task suite generation failed (e.g. vocabulary too small).
struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace icl
