#include "xdfs/server.hpp"

#include <spdlog/pattern_formatter.h>
#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <filesystem>

namespace xdfs::server {

namespace fs = std::filesystem;
using transport::Clock;
using namespace std::chrono_literals;

namespace {

constexpr const char* kZeroPrefix = "zero:";
constexpr const char* kNullName = "null:";

class LevelFlag : public spdlog::custom_flag_formatter {
 public:
  void format(const spdlog::details::log_msg& msg, const std::tm&, spdlog::memory_buf_t& dest) override {
    std::string_view name;
    switch (msg.level) {
      case spdlog::level::trace: name = "trace"; break;
      case spdlog::level::debug: name = "debug"; break;
      case spdlog::level::info: name = "info"; break;
      case spdlog::level::warn: name = "warn"; break;
      case spdlog::level::err: name = "error"; break;
      default: name = "critical"; break;
    }
    dest.append(name.data(), name.data() + name.size());
  }
  std::unique_ptr<custom_flag_formatter> clone() const override { return std::make_unique<LevelFlag>(); }
};

std::shared_ptr<spdlog::logger> make_logger(const ServerConfig& cfg) {
  spdlog::sink_ptr sink;
  if (cfg.log_path.empty()) {
    sink = std::make_shared<spdlog::sinks::stderr_sink_mt>();
  } else {
    sink = std::make_shared<spdlog::sinks::basic_file_sink_mt>(cfg.log_path);
  }
  auto log = std::make_shared<spdlog::logger>("xferd", sink);
  auto fmt = std::make_unique<spdlog::pattern_formatter>();
  fmt->add_flag<LevelFlag>('L').set_pattern("%Y-%m-%d %H:%M:%S.%e %L %v");
  log->set_formatter(std::move(fmt));
  log->set_level(spdlog::level::from_str(cfg.log_level));
  log->flush_on(spdlog::level::info);
  return log;
}

std::optional<std::uint64_t> parse_u64(const std::string& s) {
  if (s.empty() || s.size() > 20) return std::nullopt;
  std::uint64_t v = 0;
  for (char c : s) {
    if (c < '0' || c > '9') return std::nullopt;
    std::uint64_t d = static_cast<std::uint64_t>(c - '0');
    if (v > (UINT64_MAX - d) / 10) return std::nullopt;
    v = v * 10 + d;
  }
  return v;
}

}  // namespace

void validate(const ServerConfig& cfg) {
  std::error_code ec;
  if (!fs::is_directory(cfg.root_dir, ec)) throw Error(Errc::NotFound, "root directory " + cfg.root_dir);
  if (cfg.max_sessions < 1) throw Error(Errc::Usage, "max_sessions must be at least 1");
  if (cfg.ring_slots < 1) throw Error(Errc::Usage, "ring_slots must be at least 1");
  // port 0 asks for an ephemeral port
  if (!cfg.sim_network && cfg.bind.port != 0) cfg.bind.validate();
  if (!cfg.sim_network && cfg.bind.host.empty()) throw Error(Errc::Usage, "endpoint host is empty");
}

std::string resolve_under_root(const std::string& root, const std::string& remote) {
  if (remote.empty()) throw Error(Errc::PermissionDenied, "empty remote file name");
  fs::path rel;
  std::size_t start = 0;
  while (start <= remote.size()) {
    std::size_t end = remote.find('/', start);
    if (end == std::string::npos) end = remote.size();
    std::string seg = remote.substr(start, end - start);
    if (seg == "..") throw Error(Errc::PermissionDenied, "path traversal in " + remote);
    if (!seg.empty() && seg != ".") rel /= seg;
    start = end + 1;
  }
  if (rel.empty()) throw Error(Errc::PermissionDenied, "remote file name names the root");
  fs::path base = fs::path(root).lexically_normal();
  fs::path full = (base / rel).lexically_normal();
  auto b = base.begin();
  auto f = full.begin();
  for (; b != base.end(); ++b, ++f) {
    if (b->empty()) continue;  // trailing separator
    if (f == full.end() || *f != *b) throw Error(Errc::PermissionDenied, remote + " escapes the root");
  }
  return full.string();
}

struct Server::Slot {
  wire::SessionId id;
  wire::Direction direction = wire::Direction::Download;
  std::uint32_t channels = 0;
  std::string remote;
  std::mutex mu;
  piod::TransferCounters counters;
  bool done = false;
  bool success = false;
  std::string state;
  std::string error;
  std::thread thread;

  SessionMetrics snapshot() {
    std::lock_guard lk(mu);
    return SessionMetrics{id, direction, channels, remote, counters, done, success, state, error};
  }
};

Server::Server(ServerConfig cfg) : cfg_(std::move(cfg)) {}

std::unique_ptr<Server> Server::serve(ServerConfig cfg) {
  validate(cfg);
  std::unique_ptr<Server> s(new Server(std::move(cfg)));
  s->log_ = make_logger(s->cfg_);
  if (s->cfg_.sim_network) {
    s->acceptor_ = s->cfg_.sim_network->listen(s->cfg_.sim_port);
  } else {
    s->acceptor_ = transport::listen(s->cfg_.bind);
  }
  s->endpoint_ = s->acceptor_->local_endpoint();
  if (s->cfg_.sim_network) s->cfg_.sim_port = static_cast<std::uint16_t>(s->endpoint_.port);
  auto auth = s->cfg_.authenticator ? s->cfg_.authenticator : std::make_shared<session::StubAuthenticator>();
  s->registry_ = std::make_unique<session::SessionRegistry>(auth, session::SessionRegistry::ClockFn{},
                                                            s->cfg_.max_sessions);
  auto* p = s.get();
  s->listener_ = std::thread([p, scope = ThreadCensus::Scope(&p->census_)] { p->listener_loop(); });
  s->waiter_ = std::thread([p, scope = ThreadCensus::Scope(&p->census_)] { p->waiter_loop(); });
  s->metrics_ = std::thread([p, scope = ThreadCensus::Scope(&p->census_)] { p->metrics_loop(); });
  s->log_->info("listening on {} root={} disk-mode={}", s->endpoint_.to_string(), s->cfg_.root_dir,
                storage::to_string(s->cfg_.disk_mode));
  return s;
}

Server::~Server() {
  // a failed serve() never started the threads
  if (!shut_down_ && registry_) shutdown(0ms);
}

struct Server::Pending {
  transport::StreamPtr stream;
  wire::Bytes buf;
  Clock::time_point deadline;
};

void Server::listener_loop() {
  std::vector<Pending> pending;
  while (!stopping_.load(std::memory_order_acquire)) {
    try {
      while (auto s = acceptor_->accept(pending.empty() ? 50ms : 0ms)) {
        pending.push_back(Pending{std::move(s), {}, Clock::now() + cfg_.handshake_timeout});
        if (stopping_.load()) break;
      }
    } catch (const std::exception& e) {
      log_->warn("accept failed: {}", e.what());
      std::this_thread::sleep_for(10ms);
    }
    if (pending.empty()) continue;

    std::vector<transport::ChannelStream*> ps;
    std::vector<transport::Interest> is;
    for (auto& p : pending) {
      ps.push_back(p.stream.get());
      is.push_back({true, false});
    }
    std::vector<transport::Readiness> ready;
    try {
      ready = transport::poll_readiness(ps, is, 20ms);
    } catch (const std::exception& e) {
      log_->warn("poll failed: {}", e.what());
    }
    std::vector<bool> drop(pending.size(), false);
    for (const auto& r : ready) {
      auto& p = pending[r.index];
      try {
        for (;;) {
          auto probe = wire::peek_negotiation_size(p.buf);
          if (probe.known && p.buf.size() == probe.size) {
            handle_frame(std::move(p.stream), p.buf);
            drop[r.index] = true;
            break;
          }
          std::size_t have = p.buf.size();
          std::size_t want = std::max(probe.size, have + 1) - have;
          p.buf.resize(have + want);
          auto io = p.stream->read(std::span(p.buf.data() + have, want));
          p.buf.resize(have + (io.status == transport::IoResult::Status::Ok ? io.bytes : 0));
          if (io.status == transport::IoResult::Status::WouldBlock) break;
          if (io.status != transport::IoResult::Status::Ok) {
            drop[r.index] = true;
            break;
          }
        }
      } catch (const Error& e) {
        if (p.stream) reject(std::move(p.stream), {}, e.code(), e.what());
        drop[r.index] = true;
      }
    }
    auto now = Clock::now();
    for (std::size_t i = 0; i < pending.size(); ++i) {
      if (!drop[i] && now >= pending[i].deadline) {
        log_->warn("negotiation timed out on {}", pending[i].stream->describe());
        drop[i] = true;
      }
    }
    std::vector<Pending> keep;
    for (std::size_t i = 0; i < pending.size(); ++i) {
      if (!drop[i]) keep.push_back(std::move(pending[i]));
      else if (pending[i].stream) pending[i].stream->close();
    }
    pending.swap(keep);
  }
  for (auto& p : pending) p.stream->close();
  acceptor_->close();
}

void Server::reject(transport::StreamPtr stream, const wire::SessionId& id, Errc code, const std::string& reason) {
  rejected_.fetch_add(1);
  log_->warn("session {}: rejected channel: {}", id.to_string(), reason);
  try {
    wire::NegotiationReply rep;
    rep.status = wire::ReplyStatus::Rejected;
    rep.session_id = id;
    rep.code = session::reply_code(code);
    rep.reason = reason.substr(0, std::min(reason.size(), wire::kMaxStringField));
    if (!wire::is_valid_utf8(rep.reason)) rep.reason = std::string(errc_name(code));
    transport::write_all(*stream, wire::encode_reply(rep), Clock::now() + 1s);
  } catch (const std::exception&) {
  }
  stream->close();
}

void Server::open_session_file(session::SessionRecord& rec) {
  const auto& p = rec.params;
  std::shared_ptr<storage::FileStream> file;
  if (p.direction == wire::Direction::Download) {
    if (p.remote_file_name.rfind(kZeroPrefix, 0) == 0) {
      auto n = parse_u64(p.remote_file_name.substr(std::string(kZeroPrefix).size()));
      if (!n) throw Error(Errc::NotFound, "bad zero: size in " + p.remote_file_name);
      file = storage::zero_stream(*n);
    } else {
      file = storage::open_stream(resolve_under_root(cfg_.root_dir, p.remote_file_name), storage::OpenMode::Read);
    }
    rec.file_size = file->size();
  } else {
    if (p.remote_file_name == kNullName) {
      file = storage::null_stream();
    } else {
      file = storage::open_stream(resolve_under_root(cfg_.root_dir, p.remote_file_name),
                                  storage::OpenMode::WriteCreate);
    }
    auto it = p.extended_mode.find("size");
    if (it != p.extended_mode.end()) {
      auto n = parse_u64(it->second);
      if (!n) throw Error(Errc::InvariantViolation, "bad size hint");
      file->resize(*n);
      rec.file_size = *n;
    }
  }
  rec.attachment = file;
}

void Server::handle_frame(transport::StreamPtr stream, const wire::Bytes& frame) {
  auto mode = wire::peek_requested_mode(frame);
  if (mode && *mode != wire::ChannelEvent::XFTSM && *mode != wire::ChannelEvent::XFTSMU) {
    reject(std::move(stream), {}, Errc::Rejected, std::string("mode not implemented: ") + wire::to_string(*mode));
    return;
  }
  wire::NegotiationRequest req;
  try {
    req = wire::decode_negotiation(frame);
  } catch (const Error& e) {
    reject(std::move(stream), {}, e.code(), e.what());
    return;
  }
  try {
    auto res = registry_->register_or_join(
        stream, req, [&](session::SessionRecord& rec, session::Role role, transport::ChannelStream& s) {
          if (role == session::Role::Registrar) open_session_file(rec);
          wire::NegotiationReply rep;
          rep.session_id = req.session_id;
          rep.file_size = rec.file_size;
          transport::write_all(s, wire::encode_reply(rep), Clock::now() + 1s);
        });
    log_->info("session {}: channel {}/{} {} ({} {})", req.session_id.to_string(), req.channel_index,
               req.channel_count, res.role == session::Role::Registrar ? "registered" : "joined",
               wire::to_string(req.direction), req.remote_file_name);
    if (res.activated) {
      {
        std::lock_guard lk(queue_mu_);
        activated_.push_back(res.record);
      }
      queue_cv_.notify_all();
    }
  } catch (const Error& e) {
    if (stream) reject(std::move(stream), req.session_id, e.code(), e.what());
  }
}

void Server::waiter_loop() {
  for (;;) {
    session::RecordPtr rec;
    {
      std::unique_lock lk(queue_mu_);
      queue_cv_.wait_for(lk, 100ms, [&] { return waiter_done_ || !activated_.empty(); });
      if (!activated_.empty()) {
        rec = activated_.front();
        activated_.pop_front();
      } else if (waiter_done_) {
        break;
      }
    }
    if (rec) {
      auto slot = std::make_shared<Slot>();
      slot->id = rec->session_id;
      slot->direction = rec->direction;
      slot->channels = rec->expected_channels;
      slot->remote = rec->params.remote_file_name;
      slot->state = "Active";
      {
        std::lock_guard lk(slots_mu_);
        slots_.push_back(slot);
      }
      session_threads_.fetch_add(1);
      slot->thread = std::thread(
          [this, slot, rec = std::move(rec), scope = ThreadCensus::Scope(&census_)]() mutable {
            session_main(slot, std::move(rec));
          });
    }
    reap_finished(false);
  }
  reap_finished(true);
}

void Server::reap_finished(bool all) {
  std::vector<std::shared_ptr<Slot>> done;
  {
    std::unique_lock lk(slots_mu_);
    if (all) slots_cv_.wait(lk, [&] {
        return std::all_of(slots_.begin(), slots_.end(), [](const auto& s) {
          std::lock_guard sl(s->mu);
          return s->done;
        });
      });
    for (auto it = slots_.begin(); it != slots_.end();) {
      bool finished;
      {
        std::lock_guard sl((*it)->mu);
        finished = (*it)->done;
      }
      if (finished) {
        done.push_back(*it);
        it = slots_.erase(it);
      } else {
        ++it;
      }
    }
  }
  for (auto& s : done) {
    if (s->thread.joinable()) s->thread.join();
    std::lock_guard lk(slots_mu_);
    history_.push_back(s->snapshot());
  }
}

void Server::session_main(std::shared_ptr<Slot> slot, session::RecordPtr rec) {
  const auto id = rec->session_id;
  piod::SessionResult result;
  try {
    piod::SessionInputs in;
    for (auto& [i, s] : rec->joined) in.streams.push_back(std::move(s));
    rec->joined.clear();
    for (auto& [i, r] : rec->requests) in.requests.push_back(r);
    auto file = std::static_pointer_cast<storage::FileStream>(rec->attachment);
    in.file = file.get();
    bool download = rec->direction == wire::Direction::Download;
    if (download || rec->params.extended_mode.count("size")) in.file_size = rec->file_size;

    piod::SessionConfig cfg;
    cfg.kind = download ? fsm::MachineKind::ServerDownload : fsm::MachineKind::ServerUpload;
    cfg.engine.mode = cfg_.disk_mode;
    cfg.engine.ring_slots = cfg_.ring_slots;
    cfg.engine.census = &disk_census_;
    cfg.idle_timeout = cfg_.idle_timeout;
    cfg.abort = &abort_;
    cfg.record_trace = false;

    log_->info("session {}: started, {} channel(s), {}", id.to_string(), in.streams.size(),
               wire::to_string(rec->direction));
    piod::Dispatcher d(std::move(in), cfg);
    d.start();
    auto next_pub = Clock::now();
    while (d.step_once(50ms)) {
      if (Clock::now() >= next_pub) {
        std::lock_guard lk(slot->mu);
        slot->counters = d.counters();
        slot->state = d.machine().state_name();
        next_pub = Clock::now() + 100ms;
      }
    }
    result = d.result();
  } catch (const std::exception& e) {
    result.success = false;
    result.error = e.what();
    result.final_state = "Error";
  }
  registry_->close(id);
  rec.reset();
  if (result.success) {
    log_->info("session {}: completed, {} payload bytes", id.to_string(), result.counters.payload_bytes);
  } else {
    log_->error("session {}: failed in {}: {}", id.to_string(), result.final_state, result.error);
  }
  {
    std::lock_guard lk(slot->mu);
    slot->counters = result.counters;
    slot->success = result.success;
    slot->state = result.final_state;
    slot->error = result.error;
    slot->done = true;
  }
  session_threads_.fetch_sub(1);
  slots_cv_.notify_all();
  queue_cv_.notify_all();
}

void Server::metrics_loop() {
  std::unique_lock lk(stop_mu_);
  while (!stopping_.load(std::memory_order_acquire)) {
    stop_cv_.wait_for(lk, 100ms);
    for (const auto& id : registry_->expire_stale(cfg_.fill_timeout))
      log_->warn("session {}: expired while waiting for channels", id.to_string());
  }
}

ServerMetrics Server::metrics() const {
  ServerMetrics m;
  std::vector<std::shared_ptr<Slot>> live;
  {
    std::lock_guard lk(slots_mu_);
    live.assign(slots_.begin(), slots_.end());
    m.sessions = history_;
  }
  for (auto& s : live) m.sessions.push_back(s->snapshot());
  for (const auto& s : m.sessions) {
    if (!s.finished) ++m.active_sessions;
    else if (s.success) ++m.completed_sessions;
    else ++m.failed_sessions;
    for (const auto& c : s.counters.channels) {
      m.total_bytes_in += c.bytes_received;
      m.total_bytes_out += c.bytes_sent;
    }
  }
  m.session_thread_count = session_threads_.load();
  m.disk_thread_count = disk_census_.live();
  m.live_threads = live_threads();
  m.filling_sessions = registry_ ? registry_->filling_count() : 0;
  m.rejected_channels = rejected_.load();
  return m;
}

ServerMetrics Server::shutdown(milliseconds grace) {
  if (shut_down_) return final_metrics_;
  log_->info("shutting down, grace {} ms", grace.count());
  {
    std::lock_guard lk(stop_mu_);
    stopping_.store(true, std::memory_order_release);
  }
  stop_cv_.notify_all();
  if (listener_.joinable()) listener_.join();
  for (const auto& id : registry_->expire_stale(std::chrono::nanoseconds(-1)))
    log_->warn("session {}: dropped at shutdown while waiting for channels", id.to_string());

  auto all_done = [&] {
    std::lock_guard q(queue_mu_);
    if (!activated_.empty()) return false;
    std::lock_guard lk(slots_mu_);
    return std::all_of(slots_.begin(), slots_.end(), [](const auto& s) {
      std::lock_guard sl(s->mu);
      return s->done;
    });
  };
  auto deadline = Clock::now() + grace;
  while (!all_done() && Clock::now() < deadline) std::this_thread::sleep_for(5ms);
  abort_.store(true, std::memory_order_release);
  {
    std::lock_guard lk(queue_mu_);
    waiter_done_ = true;
  }
  queue_cv_.notify_all();
  if (waiter_.joinable()) waiter_.join();
  if (metrics_.joinable()) metrics_.join();
  shut_down_ = true;
  final_metrics_ = metrics();
  log_->info("stopped: {} completed, {} failed", final_metrics_.completed_sessions, final_metrics_.failed_sessions);
  log_->flush();
  return final_metrics_;
}

}  // namespace xdfs::server
