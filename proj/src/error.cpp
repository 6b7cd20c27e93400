#include "xdfs/error.hpp"

namespace xdfs {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::MalformedHeader: return "MalformedHeader";
    case Errc::UnknownChannelEvent: return "UnknownChannelEvent";
    case Errc::InvariantViolation: return "InvariantViolation";
    case Errc::BindFailure: return "BindFailure";
    case Errc::ConnectFailure: return "ConnectFailure";
    case Errc::Timeout: return "Timeout";
    case Errc::StreamInvalid: return "StreamInvalid";
    case Errc::NotFound: return "NotFound";
    case Errc::PermissionDenied: return "PermissionDenied";
    case Errc::IoFailure: return "IoFailure";
    case Errc::BufferClosed: return "BufferClosed";
    case Errc::DuplicateChannelIndex: return "DuplicateChannelIndex";
    case Errc::ParameterMismatch: return "ParameterMismatch";
    case Errc::SessionClosed: return "SessionClosed";
    case Errc::AuthDenied: return "AuthDenied";
    case Errc::Rejected: return "Rejected";
    case Errc::IllegalTransition: return "IllegalTransition";
    case Errc::TransferFailed: return "TransferFailed";
    case Errc::Usage: return "Usage";
  }
  return "Unknown";
}

}  // namespace xdfs
