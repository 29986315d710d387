#pragma once

#include <stdexcept>
#include <string>

namespace acmil {

/// Base of every error thrown by the library. `kind()` is a short stable tag
/// that the command line prints as a machine-parsable prefix.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct DomainError : Error {
  explicit DomainError(const std::string& what) : Error("domain", what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

struct NumericalError : Error {
  explicit NumericalError(const std::string& what) : Error("numerical", what) {}
};

struct ParseError : Error {
  explicit ParseError(const std::string& what) : Error("parse", what) {}
};

struct ValidationError : Error {
  explicit ValidationError(const std::string& what) : Error("validation", what) {}
};

struct GenerationError : Error {
  explicit GenerationError(const std::string& what) : Error("generation", what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error("io", what) {}
};

}  // namespace acmil
