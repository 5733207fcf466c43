#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mla {

enum class ErrorCode {
  EmptyIntersection,
  ShapeMismatch,
  NonFinite,
  DivergedTraining,
  EmptyClass,
  BoundaryNotFound,
  DimMismatch,
  ZeroVector,
  InsufficientPairs,
  InsufficientData,
  SingleClass,
  MissingScenarioData,
  GenerationOverflow,
  InvalidArgument,
  Config,
  Io,
};

std::string_view to_string(ErrorCode code);

// Every failure raised by the toolkit carries a machine-readable code.
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

}  // namespace mla
