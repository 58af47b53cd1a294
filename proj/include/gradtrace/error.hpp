#pragma once

#include <stdexcept>
#include <string>

namespace gradtrace {

enum class ErrorKind {
  config,
  input,
  io,
  spec_mismatch,
  corrupt_header,
  checksum,
  conflict,
  training,
  budget,
  internal,
};

const char* to_string(ErrorKind kind);

// Process exit code for an error kind:
// 0 success, 2 usage/config, 3 data, 4 I/O, 5 internal invariant breach.
int exit_code_for(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define GRADTRACE_DEFINE_ERROR(Name, Kind)                               \
  class Name : public Error {                                            \
   public:                                                               \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

GRADTRACE_DEFINE_ERROR(ConfigError, config)
GRADTRACE_DEFINE_ERROR(InputError, input)
GRADTRACE_DEFINE_ERROR(IoError, io)
GRADTRACE_DEFINE_ERROR(SpecMismatchError, spec_mismatch)
GRADTRACE_DEFINE_ERROR(CorruptHeaderError, corrupt_header)
GRADTRACE_DEFINE_ERROR(ChecksumError, checksum)
GRADTRACE_DEFINE_ERROR(ConflictError, conflict)
GRADTRACE_DEFINE_ERROR(TrainingError, training)
GRADTRACE_DEFINE_ERROR(BudgetError, budget)
GRADTRACE_DEFINE_ERROR(InternalError, internal)

#undef GRADTRACE_DEFINE_ERROR

}  // namespace gradtrace
