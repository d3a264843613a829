#pragma once

#include <stdexcept>
#include <string>

namespace fvlab {

// Base for every error raised by the library. Each subclass corresponds to
// one failure category named in the module contracts.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define FVLAB_DEFINE_ERROR(Name)          \
  class Name : public Error {             \
   public:                                \
    using Error::Error;                   \
  }

FVLAB_DEFINE_ERROR(GenerationError);
FVLAB_DEFINE_ERROR(LookupError);
FVLAB_DEFINE_ERROR(InvalidRequest);
FVLAB_DEFINE_ERROR(InvalidArgument);
FVLAB_DEFINE_ERROR(ParseError);
FVLAB_DEFINE_ERROR(ValidationError);
FVLAB_DEFINE_ERROR(SequenceTooLong);
FVLAB_DEFINE_ERROR(ConfigError);
FVLAB_DEFINE_ERROR(IndexError);
FVLAB_DEFINE_ERROR(NumericError);
FVLAB_DEFINE_ERROR(VersionMismatch);
FVLAB_DEFINE_ERROR(TrainingFailure);
FVLAB_DEFINE_ERROR(ContractViolation);
FVLAB_DEFINE_ERROR(DegenerateSource);
FVLAB_DEFINE_ERROR(IoError);

#undef FVLAB_DEFINE_ERROR

// Raised by the pipeline when a stage fails; carries the stage name.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace fvlab
