#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace droidlab {

enum class ErrorCode {
  kInvalidArgument,
  kMalformedInput,
  kUndefinedMetric,
  kTrainingDiverged,
  kBackendUnavailable,
  kPromptTooLarge,
  kUnparseableResponse,
  kStaleIndex,
  kEmptyPopulation,
  kConfigInvalid,
  kIo,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        retryable_(code == ErrorCode::kBackendUnavailable) {}
  Error(ErrorCode code, const std::string& message, bool retryable) : Error(code, message) {
    retryable_ = retryable;
  }

  ErrorCode code() const noexcept { return code_; }

  /// Transport-level failures are retried unless marked otherwise.
  bool retryable() const noexcept { return retryable_; }

 private:
  ErrorCode code_;
  bool retryable_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, const std::string& message) {
  if (!condition) fail(ErrorCode::kInvalidArgument, message);
}

}  // namespace droidlab
