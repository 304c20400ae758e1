#pragma once

#include <stdexcept>
#include <string>

namespace zymflow {

// Error families map onto CLI exit codes: config/usage -> 2, io -> 3, numeric -> 4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : NumericError {
  explicit ShapeError(const std::string& msg) : NumericError(msg) {}
};

struct DomainError : NumericError {
  explicit DomainError(const std::string& msg) : NumericError(msg) {}
};

struct InvalidRotationError : NumericError {
  explicit InvalidRotationError(const std::string& msg) : NumericError(msg) {}
};

struct InvalidStateError : NumericError {
  explicit InvalidStateError(const std::string& msg) : NumericError(msg) {}
};

struct VocabularyError : ConfigError {
  explicit VocabularyError(const std::string& msg) : ConfigError(msg) {}
};

struct GraphError : NumericError {
  explicit GraphError(const std::string& msg) : NumericError(msg) {}
};

struct DegenerateGeometryError : NumericError {
  explicit DegenerateGeometryError(const std::string& msg) : NumericError(msg) {}
};

struct EmptyPocketError : NumericError {
  explicit EmptyPocketError(const std::string& msg) : NumericError(msg) {}
};

struct SamplingError : NumericError {
  explicit SamplingError(const std::string& msg) : NumericError(msg) {}
};

}  // namespace zymflow
