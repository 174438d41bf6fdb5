#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sonofield {

/// Failure categories. The CLI maps these onto exit codes and the service onto
/// the `error` field of 4xx responses.
enum class ErrorKind {
  kShape,
  kBounds,
  kDomain,
  kConfig,
  kInvalidRotation,
  kNormalization,
  kContract,
  kNumeric,
  kSpec,
  kParse,
  kValidation,
  kIo,
  kRefinementFailed,
};

std::string_view error_category(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  std::string_view category() const { return error_category(kind_); }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace sonofield
