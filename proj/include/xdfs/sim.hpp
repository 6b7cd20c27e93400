#pragma once

// Deterministic in-memory network. Every connection is a pair of byte pipes
// with configurable latency, per-channel bandwidth cap, fragmentation of read
// boundaries, and faults injected at exact byte positions.
//
// Fragmentation boundaries are a function of stream position only (drawn from
// a generator seeded by (seed, connection ordinal, direction)), so a reader
// issuing the same read sizes against the same bytes observes the same split
// pattern on every run.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <utility>
#include <vector>

#include "xdfs/transport.hpp"

namespace xdfs::sim {

enum class Fragmentation { None, RandomSplit };

enum class FaultKind {
  Close,   // reader sees orderly close after exactly byte_position bytes
  Stall,   // bytes past byte_position are never delivered
  Refuse,  // the connect itself fails
};

enum class Flow { ClientToServer, ServerToClient };

// channel_index is the connection ordinal on the network: the k-th connection
// established (0-based) is channel k.
struct FaultEntry {
  std::size_t channel_index = 0;
  std::uint64_t byte_position = 0;
  FaultKind fault = FaultKind::Close;
  Flow flow = Flow::ServerToClient;
};

struct SimNetConfig {
  std::uint64_t seed = 1;
  std::chrono::microseconds per_channel_latency{0};
  std::optional<double> bandwidth_cap;  // bytes per second, per connection and direction
  Fragmentation fragmentation = Fragmentation::None;
  std::vector<FaultEntry> fault_plan;
  std::size_t buffer_capacity = 4u << 20;  // per direction, used when the connect window is 0
};

struct DeliveryEvent {
  std::size_t connection = 0;
  Flow flow = Flow::ClientToServer;
  std::size_t bytes = 0;
  friend bool operator==(const DeliveryEvent&, const DeliveryEvent&) = default;
};

class SimStream;
struct Connection;

class SimNetwork : public std::enable_shared_from_this<SimNetwork> {
 public:
  static std::shared_ptr<SimNetwork> create(SimNetConfig cfg);

  std::unique_ptr<transport::Acceptor> listen(std::uint16_t port);
  transport::StreamPtr connect(std::uint16_t port, std::size_t window);

  // n connected pairs that bypass any listener: (client ends, server ends).
  std::pair<std::vector<transport::StreamPtr>, std::vector<transport::StreamPtr>> make_pairs(std::size_t n,
                                                                                            std::size_t window = 0);

  std::vector<DeliveryEvent> trace() const;
  std::uint64_t trace_hash() const;
  std::size_t connection_count() const;
  const SimNetConfig& config() const { return cfg_; }

  // Used by transport::poll_readiness; all streams must belong to this network.
  std::vector<transport::Readiness> poll(std::span<transport::ChannelStream* const> streams,
                                         std::span<const transport::Interest> interest,
                                         transport::milliseconds timeout);

  // Internal plumbing shared with SimStream and the acceptor.
  struct ListenerQueue;
  std::mutex& mutex() { return mu_; }
  std::condition_variable& cv() { return cv_; }
  void record(std::size_t connection, Flow flow, std::size_t bytes);

 private:
  explicit SimNetwork(SimNetConfig cfg) : cfg_(std::move(cfg)) {}
  std::shared_ptr<Connection> new_connection_locked(std::size_t window);

  SimNetConfig cfg_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::size_t next_ordinal_ = 0;
  std::map<std::uint16_t, std::shared_ptr<ListenerQueue>> listeners_;
  std::vector<DeliveryEvent> trace_;
};

struct SimPair {
  std::shared_ptr<SimNetwork> network;
  std::vector<transport::StreamPtr> client;
  std::vector<transport::StreamPtr> server;
};

SimPair sim_pair(const SimNetConfig& cfg, std::size_t n);

// Readiness over simulated streams; all must belong to one network.
std::vector<transport::Readiness> poll_streams(std::span<transport::ChannelStream* const> streams,
                                               std::span<const transport::Interest> interest,
                                               transport::milliseconds timeout);

class SimConnector : public transport::Connector {
 public:
  SimConnector(std::shared_ptr<SimNetwork> net, std::uint16_t port, std::size_t window = 0)
      : net_(std::move(net)), port_(port), window_(window) {}
  transport::StreamPtr connect(std::size_t channel_index) override;

 private:
  std::shared_ptr<SimNetwork> net_;
  std::uint16_t port_;
  std::size_t window_;
};

}  // namespace xdfs::sim
