#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ifnet {

enum class ErrorKind {
  ShapeMismatch,
  BackwardBeforeForward,
  NonScalarOutput,
  InvalidConfig,
  WrongPatchSize,
  DimMismatch,
  EmptyRow,
  BatchTooSmall,
  DuplicateTrackIds,
  NegativeDistance,
  EmptyBatch,
  InsufficientTracks,
  ImageTooSmall,
  MalformedImport,
  OutOfBounds,
  InvalidParams,
  CorruptManifest,
  MissingPatchFile,
  NoPositives,
  CorruptCheckpoint,
  NonFiniteLoss,
  Io,
};

std::string_view error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(error_kind_name(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace ifnet
