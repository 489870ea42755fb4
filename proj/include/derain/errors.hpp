#pragma once
#include <stdexcept>
#include <string>

namespace derain {

// Base class for all library errors. Specific subclasses let callers and
// tests react to a failure mode without parsing messages.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define DERAIN_DEFINE_ERROR(Name)                              \
  struct Name : Error {                                        \
    explicit Name(const std::string& msg) : Error(msg) {}      \
  }

DERAIN_DEFINE_ERROR(DimensionMismatch);
DERAIN_DEFINE_ERROR(TransmissionRangeViolation);
DERAIN_DEFINE_ERROR(InvalidParams);
DERAIN_DEFINE_ERROR(IoError);
DERAIN_DEFINE_ERROR(EmptyCorpus);
DERAIN_DEFINE_ERROR(ShapeMismatch);
DERAIN_DEFINE_ERROR(IndivisibleChannels);
DERAIN_DEFINE_ERROR(NonFiniteActivation);
DERAIN_DEFINE_ERROR(UnknownArch);
DERAIN_DEFINE_ERROR(ArchMismatch);
DERAIN_DEFINE_ERROR(LevelTooLarge);
DERAIN_DEFINE_ERROR(NoRainPixels);
DERAIN_DEFINE_ERROR(NoUsableSamples);
DERAIN_DEFINE_ERROR(TooSmall);
DERAIN_DEFINE_ERROR(NameMismatch);
DERAIN_DEFINE_ERROR(ConfigError);

#undef DERAIN_DEFINE_ERROR

}  // namespace derain
