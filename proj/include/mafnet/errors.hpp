#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mafnet {

enum class ErrorCode {
  // niftio
  BadMagic,
  UnsupportedDatatype,
  UnsupportedScaling,
  Truncated,
  Io,
  // data
  MissingModality,
  DimensionMismatch,
  TooSmall,
  NonFinite,
  UnknownLabel,
  TooFewCases,
  BadDims,
  // models / losses
  ShapeMismatch,
  TooManyPatches,
  ZeroNegatives,
  BadClass,
  BadConfig,
  // training / checkpoints
  NonFiniteLoss,
  VersionMismatch,
  CorruptFile,
  // cli
  ExistsNonEmpty,
  EmptyHistory,
  Usage,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedDatatype: return "UnsupportedDatatype";
    case ErrorCode::UnsupportedScaling: return "UnsupportedScaling";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::Io: return "Io";
    case ErrorCode::MissingModality: return "MissingModality";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::TooSmall: return "TooSmall";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::UnknownLabel: return "UnknownLabel";
    case ErrorCode::TooFewCases: return "TooFewCases";
    case ErrorCode::BadDims: return "BadDims";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::TooManyPatches: return "TooManyPatches";
    case ErrorCode::ZeroNegatives: return "ZeroNegatives";
    case ErrorCode::BadClass: return "BadClass";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::ExistsNonEmpty: return "ExistsNonEmpty";
    case ErrorCode::EmptyHistory: return "EmptyHistory";
    case ErrorCode::Usage: return "Usage";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace mafnet
