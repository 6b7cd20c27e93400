#pragma once

// Session registry and the client side of the negotiation handshake.
//
// The first channel presenting an unknown session id registers the session;
// later channels join it until channel_count are present, at which point the
// session becomes Active and its streams are handed to a session thread.

#include <condition_variable>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "xdfs/transport.hpp"
#include "xdfs/wire.hpp"

namespace xdfs::session {

using transport::Clock;
using transport::StreamPtr;
using wire::NegotiationRequest;
using wire::SessionId;

// Rejection codes in NegotiationReply.code are Errc values offset by one so
// that zero stays "accepted".
std::uint16_t reply_code(Errc e) noexcept;
Errc errc_from_reply_code(std::uint16_t code) noexcept;

enum class SessionState { Filling, Active, Closed };
const char* to_string(SessionState s) noexcept;

enum class Role { Registrar, Joiner };

struct SessionRecord {
  SessionId session_id;
  wire::Direction direction = wire::Direction::Download;
  std::uint32_t expected_channels = 0;
  std::map<std::uint32_t, StreamPtr> joined;
  std::map<std::uint32_t, NegotiationRequest> requests;
  NegotiationRequest params;  // from the registering channel
  Clock::time_point created_at;
  SessionState state = SessionState::Filling;

  // Filled by the server when the registrar arrives.
  std::uint64_t file_size = 0;
  std::shared_ptr<void> attachment;
};

using RecordPtr = std::shared_ptr<SessionRecord>;

struct AuthResult {
  bool allow = true;
  std::string reason;
};

class Authenticator {
 public:
  virtual ~Authenticator() = default;
  virtual AuthResult authenticate(const wire::Bytes& credentials) = 0;
};

// Allows everything except the literal credential "deny".
class StubAuthenticator : public Authenticator {
 public:
  AuthResult authenticate(const wire::Bytes& credentials) override;
};

struct JoinResult {
  RecordPtr record;
  Role role = Role::Registrar;
  bool activated = false;
};

class SessionRegistry {
 public:
  using ClockFn = std::function<Clock::time_point()>;
  // Called under the registry lock just before the stream is inserted. A
  // throw aborts the join and leaves the stream with the caller.
  using BeforeInsert = std::function<void(SessionRecord&, Role, transport::ChannelStream&)>;

  explicit SessionRegistry(std::shared_ptr<Authenticator> auth = std::make_shared<StubAuthenticator>(),
                           ClockFn clock = {}, std::size_t max_sessions = 0);

  // On success the stream is moved into the record. On failure it is left in
  // `stream` and an Error is thrown: AuthDenied, DuplicateChannelIndex,
  // ParameterMismatch, SessionClosed, Rejected (session limit).
  JoinResult register_or_join(StreamPtr& stream, const NegotiationRequest& req, const BeforeInsert& before_insert = {});

  // Filling sessions older than max_fill_wait are closed and their streams
  // released.
  std::vector<SessionId> expire_stale(std::chrono::nanoseconds max_fill_wait);

  // Marks an Active session finished and forgets it.
  void close(const SessionId& id);
  // Closes everything, Filling sessions included.
  std::vector<SessionId> close_all();

  std::optional<SessionState> state_of(const SessionId& id) const;
  std::size_t joined_count(const SessionId& id) const;
  std::size_t size() const;
  std::size_t filling_count() const;
  std::size_t active_count() const;

  // Blocks until the session is Active (true) or the timeout passes.
  bool wait_active(const SessionId& id, std::chrono::milliseconds timeout) const;

 private:
  Clock::time_point now() const { return clock_ ? clock_() : Clock::now(); }

  std::shared_ptr<Authenticator> auth_;
  ClockFn clock_;
  std::size_t max_sessions_;
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::map<SessionId, RecordPtr> sessions_;
};

struct ClientParams {
  SessionId session_id;  // generated when nil
  wire::Direction direction = wire::Direction::Download;
  std::uint32_t channels = 1;
  std::string local_file_name;
  std::string remote_file_name;
  std::uint64_t tcp_window_size = 1 << 20;
  std::uint64_t block_size = 1 << 20;
  wire::Bytes credentials;
  std::map<std::string, std::string> extended_mode;
  std::chrono::milliseconds handshake_timeout{30000};

  NegotiationRequest request_for(std::uint32_t index) const;
};

struct ClientSession {
  SessionId session_id;
  std::vector<StreamPtr> streams;  // ordered by channel index
  std::vector<NegotiationRequest> requests;
  std::uint64_t file_size = 0;
};

// Connects all channels, sends every request, then collects every reply. Any
// failure closes all channels and rethrows the first error.
ClientSession negotiate_client(transport::Connector& connector, ClientParams params);

}  // namespace xdfs::session
