#include "fea/error.hpp"

namespace fea {

const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension";
    case ErrorKind::kInvalidInput: return "invalid-input";
    case ErrorKind::kLabel: return "label";
    case ErrorKind::kSpan: return "span";
    case ErrorKind::kLength: return "length";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kDuplicate: return "duplicate";
    case ErrorKind::kParse: return "parse";
    case ErrorKind::kConfig: return "configuration";
    case ErrorKind::kSize: return "size";
    case ErrorKind::kEmptyRelation: return "empty-relation";
    case ErrorKind::kEmptyData: return "empty-data";
    case ErrorKind::kCoverage: return "coverage";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kPrecondition: return "precondition";
    case ErrorKind::kCompatibility: return "compatibility";
    case ErrorKind::kVersion: return "version";
    case ErrorKind::kValidation: return "validation";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

}  // namespace fea
