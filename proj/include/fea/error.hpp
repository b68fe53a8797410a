#pragma once

#include <stdexcept>
#include <string>

namespace fea {

enum class ErrorKind {
  kDimension,
  kInvalidInput,
  kLabel,
  kSpan,
  kLength,
  kShape,
  kDuplicate,
  kParse,
  kConfig,
  kSize,
  kEmptyRelation,
  kEmptyData,
  kCoverage,
  kNumeric,
  kPrecondition,
  kCompatibility,
  kVersion,
  kValidation,
  kIo,
};

const char* error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(error_kind_name(kind)) + " error: " + message),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace fea
