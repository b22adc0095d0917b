#pragma once

#include <stdexcept>
#include <string>

namespace quadfit {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionMismatch : Error {
  explicit DimensionMismatch(const std::string& msg) : Error("DimensionMismatch: " + msg) {}
};

struct IndexError : Error {
  explicit IndexError(const std::string& msg) : Error("IndexError: " + msg) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error("ConfigError: " + msg) {}
};

struct EmptyMask : Error {
  explicit EmptyMask(const std::string& msg) : Error("EmptyMask: " + msg) {}
};

struct TooFewPoints : Error {
  explicit TooFewPoints(const std::string& msg) : Error("TooFewPoints: " + msg) {}
};

struct DegenerateConfiguration : Error {
  explicit DegenerateConfiguration(const std::string& msg)
      : Error("DegenerateConfiguration: " + msg) {}
};

struct NoValidFrames : Error {
  explicit NoValidFrames(const std::string& msg) : Error("NoValidFrames: " + msg) {}
};

struct ResolutionMismatch : Error {
  explicit ResolutionMismatch(const std::string& msg) : Error("ResolutionMismatch: " + msg) {}
};

struct DivergenceError : Error {
  explicit DivergenceError(const std::string& msg) : Error("DivergenceError: " + msg) {}
};

struct NonFiniteGradient : Error {
  explicit NonFiniteGradient(const std::string& msg) : Error("NonFiniteGradient: " + msg) {}
};

struct IoError : Error {
  explicit IoError(const std::string& msg) : Error("IoError: " + msg) {}
};

}  // namespace quadfit
