#pragma once

// Server runtime: a listener thread that accepts channels and reads their
// negotiation frames, a waiter thread that launches one thread per activated
// session, and a metrics thread that expires stale registrations and
// snapshots counters. Live threads = 3 + sessions (+1 per session in async
// disk mode).

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "xdfs/census.hpp"
#include "xdfs/piod.hpp"
#include "xdfs/session.hpp"
#include "xdfs/sim.hpp"
#include "xdfs/storage.hpp"
#include "xdfs/transport.hpp"

namespace spdlog {
class logger;
}

namespace xdfs::server {

using std::chrono::milliseconds;

struct ServerConfig {
  transport::Endpoint bind{"127.0.0.1", 0};
  storage::DiskEngineMode disk_mode = storage::DiskEngineMode::Sync;
  std::string root_dir = ".";
  milliseconds fill_timeout{30000};
  milliseconds idle_timeout{60000};
  milliseconds handshake_timeout{10000};
  std::size_t max_sessions = 64;
  std::size_t ring_slots = 64;
  std::string log_path;       // empty: standard error
  std::string log_level = "info";

  // Listen on the simulator instead of TCP when set.
  std::shared_ptr<sim::SimNetwork> sim_network;
  std::uint16_t sim_port = 0;

  std::shared_ptr<session::Authenticator> authenticator;
};

void validate(const ServerConfig& cfg);

struct SessionMetrics {
  wire::SessionId session_id;
  wire::Direction direction = wire::Direction::Download;
  std::uint32_t channels = 0;
  std::string remote_file_name;
  piod::TransferCounters counters;
  bool finished = false;
  bool success = false;
  std::string final_state;
  std::string error;
};

struct ServerMetrics {
  std::size_t active_sessions = 0;
  std::size_t session_thread_count = 0;
  std::size_t disk_thread_count = 0;
  std::size_t live_threads = 0;
  std::size_t filling_sessions = 0;
  std::uint64_t total_bytes_in = 0;
  std::uint64_t total_bytes_out = 0;
  std::size_t completed_sessions = 0;
  std::size_t failed_sessions = 0;
  std::size_t rejected_channels = 0;
  std::vector<SessionMetrics> sessions;  // live sessions and the ones that ended
};

// Resolves a remote file name under root. Rejects ".." segments and empty
// names with PermissionDenied.
std::string resolve_under_root(const std::string& root, const std::string& remote);

class Server {
 public:
  // Binds and starts the three service threads. BindFailure on error.
  static std::unique_ptr<Server> serve(ServerConfig cfg);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  transport::Endpoint endpoint() const { return endpoint_; }
  std::uint16_t sim_port() const { return cfg_.sim_port; }
  ServerMetrics metrics() const;
  // Threads started by this server that are still running.
  std::size_t live_threads() const noexcept { return census_.live() + disk_census_.live(); }
  const session::SessionRegistry& registry() const noexcept { return *registry_; }

  // Stops accepting, expires Filling sessions, gives Active ones `grace`,
  // then aborts the rest and joins every thread.
  ServerMetrics shutdown(milliseconds grace);

 private:
  struct Pending;
  struct Slot;

  explicit Server(ServerConfig cfg);
  void listener_loop();
  void waiter_loop();
  void metrics_loop();
  void session_main(std::shared_ptr<Slot> slot, session::RecordPtr rec);
  void handle_frame(transport::StreamPtr stream, const wire::Bytes& frame);
  void reject(transport::StreamPtr stream, const wire::SessionId& id, Errc code, const std::string& reason);
  void open_session_file(session::SessionRecord& rec);
  void reap_finished(bool all);

  ServerConfig cfg_;
  transport::Endpoint endpoint_;
  std::shared_ptr<spdlog::logger> log_;
  std::unique_ptr<transport::Acceptor> acceptor_;
  std::unique_ptr<session::SessionRegistry> registry_;
  ThreadCensus census_;       // listener, waiter, metrics, sessions
  ThreadCensus disk_census_;  // async disk threads
  std::atomic<std::size_t> session_threads_{0};
  std::atomic<bool> stopping_{false};
  std::atomic<bool> abort_{false};
  std::atomic<std::size_t> rejected_{0};

  std::mutex queue_mu_;
  std::condition_variable queue_cv_;
  std::list<session::RecordPtr> activated_;
  bool waiter_done_ = false;

  mutable std::mutex slots_mu_;
  std::condition_variable slots_cv_;
  std::list<std::shared_ptr<Slot>> slots_;
  std::vector<SessionMetrics> history_;

  std::mutex stop_mu_;
  std::condition_variable stop_cv_;

  std::thread listener_;
  std::thread waiter_;
  std::thread metrics_;
  bool shut_down_ = false;
  ServerMetrics final_metrics_;
};

}  // namespace xdfs::server
