#pragma once

// Client side: URL handling, one-shot transfers and the benchmark harness
// behind xduc.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "xdfs/piod.hpp"
#include "xdfs/sim.hpp"
#include "xdfs/storage.hpp"
#include "xdfs/wire.hpp"

namespace xdfs::client {

enum class UrlKind { Xdfs, File, Zero, Null };

// xdfs://host:port/path, file:path, zero:BYTES, null:
struct Url {
  UrlKind kind = UrlKind::File;
  std::string host;
  int port = 0;
  std::string path;  // remote name for xdfs, local path for file
  std::uint64_t zero_bytes = 0;

  static Url parse(const std::string& text);
  std::string to_string() const;
};

struct TransferSpec {
  std::string source_url;
  std::string dest_url;
  std::uint32_t parallel = 1;
  std::uint64_t block_size = 1 << 20;
  std::uint64_t tcp_window = 1 << 20;
  storage::DiskEngineMode disk_mode = storage::DiskEngineMode::Sync;
  bool force = false;
  std::chrono::milliseconds idle_timeout{60000};
  std::chrono::milliseconds handshake_timeout{30000};
  std::string credentials;
  bool record_trace = false;
  // When set, xdfs:// URLs are dialled on this simulated network (the port
  // names the simulated listener) instead of TCP.
  std::shared_ptr<sim::SimNetwork> sim_network;
};

struct ResolvedSpec {
  wire::Direction direction = wire::Direction::Download;
  Url remote;
  Url local;
};

// Checks the URL combination; throws Usage.
ResolvedSpec resolve(const TransferSpec& spec);

struct TransferReport {
  bool success = false;
  std::string error;
  std::optional<Errc> code;
  wire::Direction direction = wire::Direction::Download;
  std::uint32_t parallel = 1;
  wire::SessionId session_id;
  std::uint64_t bytes_transferred = 0;
  double wall_time = 0;   // seconds
  double throughput = 0;  // bits per second
  std::vector<piod::ChannelCounters> per_channel;
  piod::TransferCounters counters;
  std::string final_state;
  fsm::Trace trace;
};

double throughput_bps(std::uint64_t bytes, double seconds);

// Never throws for transfer failures; they are reported. Usage errors throw.
TransferReport transfer(const TransferSpec& spec);

struct BenchRow {
  std::string source;
  std::string dest;
  wire::Direction direction = wire::Direction::Download;
  std::uint32_t parallel = 1;
  std::uint64_t block_size = 0;
  std::uint64_t tcp_window = 0;
  std::string disk_mode;
  std::size_t repeats = 0;
  std::uint64_t bytes = 0;  // per run
  double mean_bps = 0;
  double min_bps = 0;
  double max_bps = 0;
  double mean_wall = 0;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  bool success = true;
  std::string error;
  std::optional<Errc> code;
};

// Runs `repeats` transfers for each parallelism in `sweep` (spec.parallel
// when empty). Stops at the first failed run; completed rows are kept.
BenchResult bench(TransferSpec spec, std::size_t repeats, const std::vector<std::uint32_t>& sweep,
                  const std::function<void(const BenchRow&)>& on_row = {});

std::vector<std::uint32_t> parse_sweep(const std::string& text);

std::string to_json(const BenchRow& row);
std::string csv_header();
std::string to_csv(const BenchRow& row);

// Same-host reference: one loopback TCP connection, a writer thread pushing
// `bytes` zeros and a reader discarding them. Returns bits per second.
double raw_socket_baseline(std::uint64_t bytes, std::size_t chunk = 1 << 20, std::size_t window = 1 << 20);

}  // namespace xdfs::client
