#pragma once

#include <stdexcept>

namespace protodist {

// Common base so callers can catch everything the library throws.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };
struct EmptyMaskError : Error { using Error::Error; };
struct DegenerateVectorError : Error { using Error::Error; };
struct InsufficientPairsError : Error { using Error::Error; };
struct GenerationError : Error { using Error::Error; };
struct TrainError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

}  // namespace protodist
