#pragma once

#include <stdexcept>
#include <string>

namespace ascood {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Categories. The CLI maps each category onto a distinct exit code.
class ConfigError : public Error {
 public:
  using Error::Error;
};
class DataError : public Error {
 public:
  using Error::Error;
};
class NumericError : public Error {
 public:
  using Error::Error;
};
class UsageError : public Error {
 public:
  using Error::Error;
};

#define ASCOOD_DEFINE_ERROR(Name, Base) \
  class Name : public Base {            \
   public:                              \
    using Base::Base;                   \
  }

ASCOOD_DEFINE_ERROR(DegenerateFeature, NumericError);
ASCOOD_DEFINE_ERROR(NumericFailure, NumericError);
ASCOOD_DEFINE_ERROR(ShapeMismatch, UsageError);
ASCOOD_DEFINE_ERROR(StepOutOfRange, UsageError);
ASCOOD_DEFINE_ERROR(InvalidPercentage, UsageError);
ASCOOD_DEFINE_ERROR(InvalidArgument, UsageError);
ASCOOD_DEFINE_ERROR(EmptyMask, UsageError);
ASCOOD_DEFINE_ERROR(EmptySet, UsageError);
ASCOOD_DEFINE_ERROR(NonDifferentiableModel, UsageError);
ASCOOD_DEFINE_ERROR(ConfigParseError, ConfigError);
ASCOOD_DEFINE_ERROR(InvalidSpec, ConfigError);
ASCOOD_DEFINE_ERROR(MissingDirectory, DataError);
ASCOOD_DEFINE_ERROR(UnreadableImage, DataError);
ASCOOD_DEFINE_ERROR(FormatError, DataError);

#undef ASCOOD_DEFINE_ERROR

}  // namespace ascood
