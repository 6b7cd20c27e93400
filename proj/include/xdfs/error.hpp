#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xdfs {

enum class Errc {
  MalformedHeader,
  UnknownChannelEvent,
  InvariantViolation,
  BindFailure,
  ConnectFailure,
  Timeout,
  StreamInvalid,
  NotFound,
  PermissionDenied,
  IoFailure,
  BufferClosed,
  DuplicateChannelIndex,
  ParameterMismatch,
  SessionClosed,
  AuthDenied,
  Rejected,
  IllegalTransition,
  TransferFailed,
  Usage,
};

std::string_view errc_name(Errc code) noexcept;

// Every failure raised by the library carries one of the codes above, so
// callers can branch on the kind of error without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace xdfs
