#pragma once

#include <stdexcept>
#include <string>

namespace loopq {

// Shape or dimension mismatch between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A precondition of an operation was violated by the caller.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// NaN/Inf produced, division by zero, or similar.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid quantizer/transform parameter (non-positive scale, singular P, ...).
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid model or experiment configuration. The CLI maps this to exit code 2.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A checked mathematical property did not hold. The CLI maps this to exit code 3.
struct VerificationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Reading or writing a file failed.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace loopq
