#include "xdfs/session.hpp"

#include <algorithm>

namespace xdfs::session {

std::uint16_t reply_code(Errc e) noexcept { return static_cast<std::uint16_t>(static_cast<int>(e) + 1); }

Errc errc_from_reply_code(std::uint16_t code) noexcept {
  if (code == 0 || code > static_cast<std::uint16_t>(Errc::Usage) + 1) return Errc::Rejected;
  return static_cast<Errc>(code - 1);
}

const char* to_string(SessionState s) noexcept {
  switch (s) {
    case SessionState::Filling: return "Filling";
    case SessionState::Active: return "Active";
    case SessionState::Closed: return "Closed";
  }
  return "?";
}

AuthResult StubAuthenticator::authenticate(const wire::Bytes& credentials) {
  static const std::string kDeny = "deny";
  if (credentials.size() == kDeny.size() && std::equal(credentials.begin(), credentials.end(), kDeny.begin()))
    return {false, "credentials denied"};
  return {true, {}};
}

SessionRegistry::SessionRegistry(std::shared_ptr<Authenticator> auth, ClockFn clock, std::size_t max_sessions)
    : auth_(std::move(auth)), clock_(std::move(clock)), max_sessions_(max_sessions) {}

namespace {

void check_coherent(const SessionRecord& rec, const NegotiationRequest& req) {
  const auto& p = rec.params;
  auto mismatch = [](const char* what) { throw Error(Errc::ParameterMismatch, std::string(what) + " differs"); };
  if (req.direction != p.direction) mismatch("direction");
  if (req.channel_count != p.channel_count) mismatch("channel_count");
  if (req.remote_file_name != p.remote_file_name) mismatch("remote_file_name");
  if (req.block_size != p.block_size) mismatch("block_size");
}

}  // namespace

JoinResult SessionRegistry::register_or_join(StreamPtr& stream, const NegotiationRequest& req,
                                             const BeforeInsert& before_insert) {
  if (!stream) throw Error(Errc::StreamInvalid, "null stream");
  wire::validate(req);
  if (auth_) {
    AuthResult a = auth_->authenticate(req.credentials);
    if (!a.allow) throw Error(Errc::AuthDenied, a.reason.empty() ? "denied" : a.reason);
  }

  JoinResult result;
  {
    std::lock_guard lk(mu_);
    auto it = sessions_.find(req.session_id);
    if (it == sessions_.end()) {
      if (max_sessions_ && sessions_.size() >= max_sessions_) throw Error(Errc::Rejected, "session limit reached");
      auto rec = std::make_shared<SessionRecord>();
      rec->session_id = req.session_id;
      rec->direction = req.direction;
      rec->expected_channels = req.channel_count;
      rec->params = req;
      rec->created_at = now();
      if (before_insert) before_insert(*rec, Role::Registrar, *stream);
      rec->requests[req.channel_index] = req;
      rec->joined[req.channel_index] = std::move(stream);
      result.role = Role::Registrar;
      result.record = rec;
      sessions_.emplace(req.session_id, rec);
    } else {
      auto& rec = it->second;
      if (rec->state != SessionState::Filling) throw Error(Errc::SessionClosed, "session " + req.session_id.to_string() + " is not accepting channels");
      check_coherent(*rec, req);
      if (rec->joined.count(req.channel_index))
        throw Error(Errc::DuplicateChannelIndex, "channel " + std::to_string(req.channel_index) + " already joined");
      if (before_insert) before_insert(*rec, Role::Joiner, *stream);
      rec->requests[req.channel_index] = req;
      rec->joined[req.channel_index] = std::move(stream);
      result.role = Role::Joiner;
      result.record = rec;
    }
    if (result.record->joined.size() == result.record->expected_channels) {
      result.record->state = SessionState::Active;
      result.activated = true;
    }
  }
  if (result.activated) cv_.notify_all();
  return result;
}

std::vector<SessionId> SessionRegistry::expire_stale(std::chrono::nanoseconds max_fill_wait) {
  std::vector<SessionId> expired;
  std::vector<RecordPtr> doomed;
  {
    std::lock_guard lk(mu_);
    auto t = now();
    for (auto it = sessions_.begin(); it != sessions_.end();) {
      auto& rec = it->second;
      if (rec->state == SessionState::Filling && t - rec->created_at > max_fill_wait) {
        rec->state = SessionState::Closed;
        expired.push_back(it->first);
        doomed.push_back(rec);
        it = sessions_.erase(it);
      } else {
        ++it;
      }
    }
  }
  // streams are closed outside the lock
  for (auto& rec : doomed) {
    for (auto& [i, s] : rec->joined) s->close();
    rec->joined.clear();
  }
  if (!expired.empty()) cv_.notify_all();
  return expired;
}

void SessionRegistry::close(const SessionId& id) {
  RecordPtr rec;
  {
    std::lock_guard lk(mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) return;
    rec = it->second;
    sessions_.erase(it);
    if (rec->state == SessionState::Filling) {
      rec->state = SessionState::Closed;
    } else {
      rec->state = SessionState::Closed;
      rec.reset();  // streams belong to the session thread now
    }
  }
  if (rec) {
    for (auto& [i, s] : rec->joined) s->close();
    rec->joined.clear();
  }
  cv_.notify_all();
}

std::vector<SessionId> SessionRegistry::close_all() {
  std::vector<SessionId> ids;
  {
    std::lock_guard lk(mu_);
    for (auto& [id, rec] : sessions_) ids.push_back(id);
  }
  for (const auto& id : ids) close(id);
  return ids;
}

std::optional<SessionState> SessionRegistry::state_of(const SessionId& id) const {
  std::lock_guard lk(mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) return std::nullopt;
  return it->second->state;
}

std::size_t SessionRegistry::joined_count(const SessionId& id) const {
  std::lock_guard lk(mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) return 0;
  return it->second->requests.size();
}

std::size_t SessionRegistry::size() const {
  std::lock_guard lk(mu_);
  return sessions_.size();
}

std::size_t SessionRegistry::filling_count() const {
  std::lock_guard lk(mu_);
  return static_cast<std::size_t>(std::count_if(sessions_.begin(), sessions_.end(), [](const auto& kv) {
    return kv.second->state == SessionState::Filling;
  }));
}

std::size_t SessionRegistry::active_count() const {
  std::lock_guard lk(mu_);
  return static_cast<std::size_t>(std::count_if(sessions_.begin(), sessions_.end(), [](const auto& kv) {
    return kv.second->state == SessionState::Active;
  }));
}

bool SessionRegistry::wait_active(const SessionId& id, std::chrono::milliseconds timeout) const {
  std::unique_lock lk(mu_);
  return cv_.wait_for(lk, timeout, [&] {
    auto it = sessions_.find(id);
    return it != sessions_.end() && it->second->state == SessionState::Active;
  });
}

NegotiationRequest ClientParams::request_for(std::uint32_t index) const {
  NegotiationRequest r;
  r.session_id = session_id;
  r.direction = direction;
  r.channel_index = index;
  r.channel_count = channels;
  r.local_file_name = local_file_name;
  r.remote_file_name = remote_file_name;
  r.tcp_window_size = tcp_window_size;
  r.block_size = block_size;
  r.credentials = credentials;
  r.extended_mode = extended_mode;
  return r;
}

ClientSession negotiate_client(transport::Connector& connector, ClientParams params) {
  if (params.session_id.is_nil()) params.session_id = SessionId::generate();
  if (params.channels == 0) throw Error(Errc::InvariantViolation, "at least one channel is required");
  ClientSession out;
  out.session_id = params.session_id;
  for (std::uint32_t i = 0; i < params.channels; ++i) {
    out.requests.push_back(params.request_for(i));
    wire::validate(out.requests.back());
  }
  try {
    for (std::uint32_t i = 0; i < params.channels; ++i) {
      auto s = connector.connect(i);
      if (!s) throw Error(Errc::ConnectFailure, "channel " + std::to_string(i));
      out.streams.push_back(std::move(s));
    }
    auto deadline = Clock::now() + params.handshake_timeout;
    for (std::uint32_t i = 0; i < params.channels; ++i)
      transport::write_all(*out.streams[i], wire::encode_negotiation(out.requests[i]), deadline);
    for (std::uint32_t i = 0; i < params.channels; ++i) {
      auto frame = transport::read_frame(*out.streams[i], wire::peek_reply_size, deadline);
      auto reply = wire::decode_reply(frame);
      if (reply.status != wire::ReplyStatus::Accepted)
        throw Error(errc_from_reply_code(reply.code), "channel " + std::to_string(i) + ": " + reply.reason);
      if (reply.session_id != params.session_id)
        throw Error(Errc::InvariantViolation, "reply for a different session");
      if (i == 0) out.file_size = reply.file_size;
      else if (reply.file_size != out.file_size)
        throw Error(Errc::ParameterMismatch, "channels disagree on file size");
    }
  } catch (...) {
    for (auto& s : out.streams) s->close();
    out.streams.clear();
    throw;
  }
  return out;
}

}  // namespace xdfs::session
