#pragma once

#include <stdexcept>
#include <string>

namespace forenvit {

/// Broad failure classes. The CLI maps each one to an exit code.
enum class ErrorClass {
  config,
  data,
  io,
  numeric,
  contract,
  shape,
  state,
};

inline const char* error_class_name(ErrorClass c) {
  switch (c) {
    case ErrorClass::config: return "config";
    case ErrorClass::data: return "data";
    case ErrorClass::io: return "io";
    case ErrorClass::numeric: return "numeric";
    case ErrorClass::contract: return "contract";
    case ErrorClass::shape: return "shape";
    case ErrorClass::state: return "state";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, const std::string& what) : std::runtime_error(what), class_(cls) {}
  ErrorClass error_class() const noexcept { return class_; }

 private:
  ErrorClass class_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorClass::config, w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error(ErrorClass::data, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorClass::io, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorClass::numeric, w) {}
};
struct InvalidValueError : NumericError {
  explicit InvalidValueError(const std::string& w) : NumericError(w) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& w) : Error(ErrorClass::contract, w) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorClass::shape, w) {}
};
struct StateError : Error {
  explicit StateError(const std::string& w) : Error(ErrorClass::state, w) {}
};
struct DegenerateDataError : DataError {
  explicit DegenerateDataError(const std::string& w) : DataError(w) {}
};

// Checkpoint load failures, each distinguishable by type.
struct CheckpointError : DataError {
  explicit CheckpointError(const std::string& w) : DataError(w) {}
};
struct MagicMismatchError : CheckpointError {
  explicit MagicMismatchError(const std::string& w) : CheckpointError(w) {}
};
struct VersionMismatchError : CheckpointError {
  explicit VersionMismatchError(const std::string& w) : CheckpointError(w) {}
};
struct TruncatedError : CheckpointError {
  explicit TruncatedError(const std::string& w) : CheckpointError(w) {}
};
struct UnknownParameterError : CheckpointError {
  explicit UnknownParameterError(const std::string& w) : CheckpointError(w) {}
};
struct ParameterShapeError : CheckpointError {
  explicit ParameterShapeError(const std::string& w) : CheckpointError(w) {}
};

}  // namespace forenvit
