#pragma once

#include <stdexcept>
#include <string>

namespace vlmkd {

/// Base class for every error raised by the library. The exit code is what the
/// CLI returns when the error escapes a subcommand.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, int exit_code = 2)
      : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

#define VLMKD_ERROR_CLASS(Name, code)                              \
  class Name : public Error {                                      \
   public:                                                         \
    explicit Name(const std::string& what) : Error(what, code) {} \
  }

// Validation / configuration problems (exit 1).
VLMKD_ERROR_CLASS(ConfigError, 1);
VLMKD_ERROR_CLASS(ContractError, 1);
VLMKD_ERROR_CLASS(RangeError, 1);
VLMKD_ERROR_CLASS(DomainError, 1);
VLMKD_ERROR_CLASS(WiringError, 1);
VLMKD_ERROR_CLASS(PathError, 1);

// Runtime problems (exit 2).
VLMKD_ERROR_CLASS(NumericError, 2);
VLMKD_ERROR_CLASS(FormatError, 2);
VLMKD_ERROR_CLASS(CorruptionError, 2);
VLMKD_ERROR_CLASS(IntegrityError, 2);
VLMKD_ERROR_CLASS(TransportError, 2);
VLMKD_ERROR_CLASS(MalformedResponseError, 2);
VLMKD_ERROR_CLASS(ProtocolError, 2);

// Remote work finished with some items missing (exit 3).
VLMKD_ERROR_CLASS(PartialFailureError, 3);

#undef VLMKD_ERROR_CLASS

}  // namespace vlmkd
