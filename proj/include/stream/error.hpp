#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace stream {

enum class Errc {
  // tensor_store
  MalformedHeader,
  ShapeMismatch,
  UnsupportedDtype,
  MissingFile,
  InconsistentShape,
  InvalidManifest,
  Io,
  // grid / estimator / oracle
  InvalidParams,
  DimensionMismatch,
  EmptyContext,
  NoValidPair,
  EmptyRow,
  ContextTooLarge,
  GridMismatch,
  NonNormalizedRows,
  // analytics
  DegenerateDistribution,
  NoValidProfiles,
  SparsityOutOfRange,
  // search
  SearchExhausted,
  EvaluatorFailure,
  // flow
  LayerSetMismatch,
  BlockOutOfRange,
};

inline std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::MalformedHeader: return "MalformedHeader";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::UnsupportedDtype: return "UnsupportedDtype";
    case Errc::MissingFile: return "MissingFile";
    case Errc::InconsistentShape: return "InconsistentShape";
    case Errc::InvalidManifest: return "InvalidManifest";
    case Errc::Io: return "Io";
    case Errc::InvalidParams: return "InvalidParams";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::EmptyContext: return "EmptyContext";
    case Errc::NoValidPair: return "NoValidPair";
    case Errc::EmptyRow: return "EmptyRow";
    case Errc::ContextTooLarge: return "ContextTooLarge";
    case Errc::GridMismatch: return "GridMismatch";
    case Errc::NonNormalizedRows: return "NonNormalizedRows";
    case Errc::DegenerateDistribution: return "DegenerateDistribution";
    case Errc::NoValidProfiles: return "NoValidProfiles";
    case Errc::SparsityOutOfRange: return "SparsityOutOfRange";
    case Errc::SearchExhausted: return "SearchExhausted";
    case Errc::EvaluatorFailure: return "EvaluatorFailure";
    case Errc::LayerSetMismatch: return "LayerSetMismatch";
    case Errc::BlockOutOfRange: return "BlockOutOfRange";
  }
  return "Unknown";
}

// All library failures are reported as stream::Error carrying a code.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace stream
