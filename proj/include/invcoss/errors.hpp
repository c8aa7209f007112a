#pragma once

#include <stdexcept>
#include <string>

namespace invcoss {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform for an op.
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf detected, or a numeric contract violated.
struct NumericError : Error {
  using Error::Error;
};

// Invalid or unknown configuration input.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed container file.
struct FormatError : Error {
  using Error::Error;
};

// Statistics archive does not match the checkpoint it claims to be from.
struct FingerprintError : Error {
  using Error::Error;
};

// A required serialized artifact is absent.
struct MissingArtifactError : Error {
  using Error::Error;
};

}  // namespace invcoss
