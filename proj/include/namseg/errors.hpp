#pragma once

#include <stdexcept>
#include <string>

namespace namseg {

// Every failure raised by the library derives from Error so callers (the CLI in
// particular) can map library failures to a single exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define NAMSEG_DEFINE_ERROR(Name)              \
  class Name : public Error {                  \
   public:                                     \
    using Error::Error;                        \
  }

NAMSEG_DEFINE_ERROR(DimensionError);   // operand shapes disagree
NAMSEG_DEFINE_ERROR(GeometryError);    // spatial sizes incompatible with an op
NAMSEG_DEFINE_ERROR(IndexError);       // class index / coordinate out of range
NAMSEG_DEFINE_ERROR(StateError);       // API called in the wrong order
NAMSEG_DEFINE_ERROR(ConfigError);      // invalid configuration values
NAMSEG_DEFINE_ERROR(FormatError);      // malformed file contents
NAMSEG_DEFINE_ERROR(DataError);        // dataset content unusable for the request
NAMSEG_DEFINE_ERROR(NumericError);     // non-finite weights or values
NAMSEG_DEFINE_ERROR(DomainError);      // argument outside the function's domain
NAMSEG_DEFINE_ERROR(DegenerateMapError);  // activation map without a distinct maximum
NAMSEG_DEFINE_ERROR(SelectionError);   // nothing to select from

#undef NAMSEG_DEFINE_ERROR

}  // namespace namseg
