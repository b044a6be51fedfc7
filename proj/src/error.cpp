#include "ifnet/error.hpp"

namespace ifnet {

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::BackwardBeforeForward: return "BackwardBeforeForward";
    case ErrorKind::NonScalarOutput: return "NonScalarOutput";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::WrongPatchSize: return "WrongPatchSize";
    case ErrorKind::DimMismatch: return "DimMismatch";
    case ErrorKind::EmptyRow: return "EmptyRow";
    case ErrorKind::BatchTooSmall: return "BatchTooSmall";
    case ErrorKind::DuplicateTrackIds: return "DuplicateTrackIds";
    case ErrorKind::NegativeDistance: return "NegativeDistance";
    case ErrorKind::EmptyBatch: return "EmptyBatch";
    case ErrorKind::InsufficientTracks: return "InsufficientTracks";
    case ErrorKind::ImageTooSmall: return "ImageTooSmall";
    case ErrorKind::MalformedImport: return "MalformedImport";
    case ErrorKind::OutOfBounds: return "OutOfBounds";
    case ErrorKind::InvalidParams: return "InvalidParams";
    case ErrorKind::CorruptManifest: return "CorruptManifest";
    case ErrorKind::MissingPatchFile: return "MissingPatchFile";
    case ErrorKind::NoPositives: return "NoPositives";
    case ErrorKind::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace ifnet
