#pragma once

#include <stdexcept>
#include <string>

namespace ipl {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define IPL_DEFINE_ERROR(Name)                 \
  class Name : public Error {                  \
   public:                                     \
    using Error::Error;                        \
  }

// numerics
IPL_DEFINE_ERROR(ShapeMismatch);
IPL_DEFINE_ERROR(NonFinite);
IPL_DEFINE_ERROR(EmptyMask);
IPL_DEFINE_ERROR(TokenOutOfRange);
IPL_DEFINE_ERROR(NotScalar);
IPL_DEFINE_ERROR(AlreadyConsumed);
IPL_DEFINE_ERROR(TapeMismatch);

// model / engine
IPL_DEFINE_ERROR(SequenceTooLong);
IPL_DEFINE_ERROR(IncompatibleCheckpoint);
IPL_DEFINE_ERROR(TrainingDiverged);

// data
IPL_DEFINE_ERROR(AlphabetViolation);
IPL_DEFINE_ERROR(LengthOverflow);
IPL_DEFINE_ERROR(TooFewExamples);
IPL_DEFINE_ERROR(NotCompositional);

// metrics / analysis
IPL_DEFINE_ERROR(EmptyCorpus);
IPL_DEFINE_ERROR(ZeroMassConditioning);
IPL_DEFINE_ERROR(SpanMismatch);

// io / cli
IPL_DEFINE_ERROR(IoFailure);
IPL_DEFINE_ERROR(ManifestError);

#undef IPL_DEFINE_ERROR

}  // namespace ipl
