#include "gradtrace/error.hpp"

namespace gradtrace {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return "config";
    case ErrorKind::input: return "input";
    case ErrorKind::io: return "io";
    case ErrorKind::spec_mismatch: return "spec-mismatch";
    case ErrorKind::corrupt_header: return "corrupt-header";
    case ErrorKind::checksum: return "checksum";
    case ErrorKind::conflict: return "conflict";
    case ErrorKind::training: return "training";
    case ErrorKind::budget: return "budget";
    case ErrorKind::internal: return "internal";
  }
  return "unknown";
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config:
      return 2;
    case ErrorKind::input:
    case ErrorKind::spec_mismatch:
    case ErrorKind::conflict:
    case ErrorKind::training:
    case ErrorKind::budget:
      return 3;
    case ErrorKind::io:
    case ErrorKind::corrupt_header:
    case ErrorKind::checksum:
      return 4;
    case ErrorKind::internal:
      return 5;
  }
  return 5;
}

}  // namespace gradtrace
