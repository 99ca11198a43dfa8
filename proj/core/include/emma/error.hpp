#pragma once

#include <stdexcept>
#include <string>

namespace emma {

// Base of every error raised by the library. `kind()` is a stable short tag
// used by the CLI for its one-line diagnostics.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "error"; }
};

#define EMMA_DEFINE_ERROR(Name, tag)                              \
  class Name : public Error {                                     \
   public:                                                        \
    explicit Name(const std::string& what) : Error(what) {}       \
    const char* kind() const noexcept override { return tag; }    \
  }

// Incompatible tensor/volume extents or channel counts.
EMMA_DEFINE_ERROR(DimensionError, "dimension");
// API misuse: non-scalar loss, out-of-range label, bad argument.
EMMA_DEFINE_ERROR(UsageError, "usage");
// Input data that cannot be processed (empty mask, zero variance, ...).
EMMA_DEFINE_ERROR(DataError, "data");
// Invalid parameter values (phantom extents, optimizer settings).
EMMA_DEFINE_ERROR(ParameterError, "parameter");
// Numerical failure (NaN gradient or loss).
EMMA_DEFINE_ERROR(NumericError, "numeric");
// Schema violations in JSON configs and manifests.
EMMA_DEFINE_ERROR(ConfigError, "config");
// I/O failures: missing files, unwritable paths.
EMMA_DEFINE_ERROR(IoError, "io");
// Binary container errors.
EMMA_DEFINE_ERROR(FormatError, "format");
EMMA_DEFINE_ERROR(CrcError, "crc");
EMMA_DEFINE_ERROR(TruncationError, "truncated");
// Checkpoint does not match the network it is loaded into.
EMMA_DEFINE_ERROR(CheckpointMismatchError, "checkpoint-mismatch");

#undef EMMA_DEFINE_ERROR

}  // namespace emma
