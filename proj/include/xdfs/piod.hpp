#pragma once

// Parallel I/O dispatcher: one per session thread. Polls the session's
// channels, turns readiness and decoded frames into machine events, and
// executes the actions the machine emits.

#include <atomic>
#include <chrono>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "xdfs/census.hpp"
#include "xdfs/fsm.hpp"
#include "xdfs/scheduler.hpp"
#include "xdfs/storage.hpp"
#include "xdfs/transport.hpp"

namespace xdfs::piod {

using transport::StreamPtr;

struct DispatchLists {
  std::map<std::uint32_t, fsm::AckLifecycle> read_list;
  std::set<std::uint32_t> write_list;

  bool disjoint() const;
  bool empty() const { return read_list.empty() && write_list.empty(); }
};

struct ChannelCounters {
  std::uint64_t bytes_sent = 0;
  std::uint64_t bytes_received = 0;
  std::uint64_t blocks_sent = 0;
  std::uint64_t blocks_received = 0;
  std::uint64_t acks_sent = 0;
  std::uint64_t acks_received = 0;
};

struct TransferCounters {
  std::vector<ChannelCounters> channels;
  std::uint64_t payload_bytes = 0;  // block payload moved by this side
  std::uint64_t blocks = 0;
  std::uint64_t acks = 0;
  std::uint64_t loop_iterations = 0;
  std::uint64_t repositionings = 0;
};

struct SessionConfig {
  fsm::MachineKind kind = fsm::MachineKind::ServerDownload;
  storage::EngineConfig engine;
  std::chrono::milliseconds idle_timeout{60000};
  std::chrono::milliseconds close_grace{5000};  // time allowed to flush on close
  const std::atomic<bool>* abort = nullptr;
  bool record_trace = true;
};

struct SessionInputs {
  std::vector<StreamPtr> streams;                     // by channel index
  std::vector<wire::NegotiationRequest> requests;     // by channel index
  storage::FileStream* file = nullptr;                // source or destination
  std::optional<std::uint64_t> file_size;             // required for senders
};

struct SessionResult {
  bool success = false;
  std::string error;
  std::string final_state;
  fsm::Trace trace;
  TransferCounters counters;
  storage::EngineStats engine;
  std::vector<storage::BatchRecord> batches;
  std::vector<wire::BlockDescriptor> issued;   // sender: blocks read from the source
  std::vector<wire::BlockDescriptor> written;  // receiver: blocks handed to storage
};

class Dispatcher {
 public:
  Dispatcher(SessionInputs in, SessionConfig cfg);
  ~Dispatcher();
  Dispatcher(const Dispatcher&) = delete;
  Dispatcher& operator=(const Dispatcher&) = delete;

  // Replays registration into the machine and signals DiskReady.
  void start();
  // One poll + dispatch round. False once the session has finished and all
  // streams are closed.
  bool step_once(std::chrono::milliseconds timeout);
  bool finished() const noexcept { return finished_; }

  const fsm::Machine& machine() const { return *machine_; }
  const DispatchLists& lists() const noexcept { return lists_; }
  // Safe to call from any thread.
  TransferCounters counters() const;

  // Stops engines and collects everything. Call once finished.
  SessionResult result();

 private:
  struct OutSeg {
    wire::Bytes data;
    std::size_t pos = 0;
    bool payload = false;
  };
  struct Chan {
    StreamPtr stream;
    bool read_open = true;
    bool write_open = true;
    bool peer_closed_fed = false;
    // input
    std::array<std::uint8_t, 16> fixed{};
    std::size_t fixed_got = 0;
    std::optional<wire::ChannelHeader> header;
    std::optional<wire::ExceptionHeader> exc;
    wire::Bytes body;
    std::size_t body_got = 0;
    // output
    std::deque<OutSeg> out;
  };

  void feed(fsm::FsmEvent ev);
  void drain_events();
  void execute(const std::vector<fsm::FsmAction>& actions);
  void execute_one(const fsm::FsmAction& a);
  void enqueue(std::uint32_t i, wire::Bytes data);
  void flush(std::uint32_t i);
  void read_channel(std::uint32_t i);
  bool read_frame_part(std::uint32_t i);
  void peer_closed(std::uint32_t i);
  void collect_disk();
  void retry_blocked_writes();
  void maybe_end_of_file();
  void begin_closing();
  void close_all();
  void publish();
  bool sender() const noexcept { return fsm::is_sender(cfg_.kind); }
  bool disk_busy() const;
  void recycle(wire::Bytes b);

  SessionInputs in_;
  SessionConfig cfg_;
  std::vector<Chan> ch_;
  std::unique_ptr<fsm::Machine> machine_;
  DispatchLists lists_;
  std::deque<fsm::FsmEvent> events_;
  std::unique_ptr<storage::BlockSource> source_;
  std::unique_ptr<storage::BlockSink> sink_;
  std::optional<std::pair<wire::BlockDescriptor, wire::Bytes>> staged_;
  wire::Bytes current_payload_;
  std::vector<wire::Bytes> spare_;
  std::deque<storage::WriteRequest> blocked_writes_;
  std::vector<wire::BlockDescriptor> issued_;
  std::vector<wire::BlockDescriptor> written_;
  TransferCounters counters_;
  mutable std::mutex pub_mu_;
  TransferCounters published_;
  bool started_ = false;
  bool closing_ = false;
  bool finished_ = false;
  std::string error_;
  transport::Clock::time_point last_activity_;
  transport::Clock::time_point close_deadline_;
};

// Runs a dispatcher to completion on the calling thread.
SessionResult run_session(SessionInputs in, SessionConfig cfg);

}  // namespace xdfs::piod
