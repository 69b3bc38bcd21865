#pragma once

#include <stdexcept>
#include <string>

namespace slap {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define SLAP_DEFINE_ERROR(Name)                 \
  struct Name : Error {                         \
    explicit Name(const std::string& msg)       \
        : Error(std::string(#Name ": ") + msg) {} \
  }

SLAP_DEFINE_ERROR(DimensionMismatch);
SLAP_DEFINE_ERROR(SingularHomography);
SLAP_DEFINE_ERROR(InvalidGrid);
SLAP_DEFINE_ERROR(InsufficientFrames);
SLAP_DEFINE_ERROR(EmptyMask);
SLAP_DEFINE_ERROR(DegenerateData);
SLAP_DEFINE_ERROR(DegenerateDataset);
SLAP_DEFINE_ERROR(SignOutOfBounds);
SLAP_DEFINE_ERROR(ConfigError);
SLAP_DEFINE_ERROR(NonFiniteLoss);
SLAP_DEFINE_ERROR(InvalidSpec);
SLAP_DEFINE_ERROR(IoError);

#undef SLAP_DEFINE_ERROR

}  // namespace slap
