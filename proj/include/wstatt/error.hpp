#pragma once

#include <stdexcept>
#include <string>

namespace wstatt {

// Error taxonomy for the whole pipeline. The CLI maps categories to
// process exit codes, so every throw site picks the closest code.
enum class ErrorCode {
  BadMagic,
  VersionMismatch,
  TruncatedPayload,
  DimMismatch,
  BadConfig,
  BadData,
  NumericFailure,
  Io,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace wstatt
