#pragma once

// Shared helpers for the unit and acceptance suites.

#include <unistd.h>

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "xdfs/fsm.hpp"
#include "xdfs/piod.hpp"
#include "xdfs/sim.hpp"
#include "xdfs/storage.hpp"

namespace testsupport {

namespace fs = std::filesystem;
using xdfs::wire::Bytes;

inline std::uint64_t fnv1a(const std::uint8_t* p, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}
inline std::uint64_t fnv1a(const Bytes& b) { return fnv1a(b.data(), b.size()); }

inline Bytes random_bytes(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Bytes out(n);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    std::uint64_t v = rng();
    std::memcpy(out.data() + i, &v, 8);
  }
  for (; i < n; ++i) out[i] = static_cast<std::uint8_t>(rng());
  return out;
}

inline Bytes read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return Bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

inline void write_file(const fs::path& p, const Bytes& b) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "xdfs-test-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

// In-memory FileStream.
class MemoryFile : public xdfs::storage::FileStream {
 public:
  explicit MemoryFile(Bytes data = {}, xdfs::storage::OpenMode mode = xdfs::storage::OpenMode::WriteCreate)
      : data_(std::move(data)), mode_(mode) {}
  const std::string& path() const override { return name_; }
  xdfs::storage::OpenMode mode() const override { return mode_; }
  std::uint64_t size() const override { return data_.size(); }
  std::size_t read_at(std::uint64_t off, std::span<std::uint8_t> out) override {
    if (off >= data_.size()) return 0;
    std::size_t n = std::min<std::size_t>(out.size(), data_.size() - off);
    std::memcpy(out.data(), data_.data() + off, n);
    return n;
  }
  void write_at(std::uint64_t off, xdfs::wire::ByteView d) override {
    if (off + d.size() > data_.size()) data_.resize(off + d.size());
    std::memcpy(data_.data() + off, d.data(), d.size());
    bytes_written_ += d.size();
  }
  void resize(std::uint64_t n) override { data_.resize(n); }
  const Bytes& data() const { return data_; }

 private:
  Bytes data_;
  xdfs::storage::OpenMode mode_;
  std::string name_ = "memory:";
};

inline std::vector<xdfs::wire::NegotiationRequest> make_requests(xdfs::wire::Direction dir, std::uint32_t n,
                                                                 std::uint64_t block_size,
                                                                 std::uint64_t window = 0) {
  std::vector<xdfs::wire::NegotiationRequest> reqs;
  xdfs::wire::SessionId id;
  for (std::size_t k = 0; k < id.bytes.size(); ++k) id.bytes[k] = static_cast<std::uint8_t>(k + 1);
  for (std::uint32_t i = 0; i < n; ++i) {
    xdfs::wire::NegotiationRequest r;
    r.session_id = id;
    r.direction = dir;
    r.channel_index = i;
    r.channel_count = n;
    r.local_file_name = "local.bin";
    r.remote_file_name = "remote.bin";
    r.block_size = block_size;
    r.tcp_window_size = window;
    reqs.push_back(r);
  }
  return reqs;
}

struct LockstepResult {
  xdfs::piod::SessionResult server;
  xdfs::piod::SessionResult client;
  Bytes destination;
  std::uint64_t iterations = 0;
};

// Runs a server/client session pair on one thread over the simulator, the two
// dispatchers taking turns with zero-timeout polls. Deterministic for a fixed
// configuration.
inline LockstepResult lockstep_transfer(xdfs::wire::Direction dir, std::uint32_t n, const Bytes& source,
                                        std::uint64_t block_size, xdfs::sim::SimNetConfig net,
                                        xdfs::storage::DiskEngineMode mode = xdfs::storage::DiskEngineMode::Sync,
                                        std::uint64_t max_iterations = 5'000'000) {
  using namespace xdfs;
  auto pair = sim::sim_pair(net, n);
  auto reqs = make_requests(dir, n, block_size);
  MemoryFile src(source, storage::OpenMode::Read);
  MemoryFile dst;
  dst.resize(source.size());

  bool download = dir == wire::Direction::Download;
  piod::SessionConfig scfg;
  scfg.kind = download ? fsm::MachineKind::ServerDownload : fsm::MachineKind::ServerUpload;
  scfg.engine.mode = mode;
  scfg.engine.keep_batch_records = true;
  piod::SessionConfig ccfg = scfg;
  ccfg.kind = download ? fsm::MachineKind::ClientDownload : fsm::MachineKind::ClientUpload;

  piod::SessionInputs sin;
  sin.streams = std::move(pair.server);
  sin.requests = reqs;
  sin.file = download ? static_cast<storage::FileStream*>(&src) : &dst;
  sin.file_size = source.size();
  piod::SessionInputs cin;
  cin.streams = std::move(pair.client);
  cin.requests = reqs;
  cin.file = download ? static_cast<storage::FileStream*>(&dst) : &src;
  cin.file_size = source.size();

  piod::Dispatcher server(std::move(sin), scfg);
  piod::Dispatcher client(std::move(cin), ccfg);
  server.start();
  client.start();
  LockstepResult out;
  while (!server.finished() || !client.finished()) {
    if (++out.iterations > max_iterations) break;
    if (!server.finished()) server.step_once(std::chrono::milliseconds(0));
    if (!client.finished()) client.step_once(std::chrono::milliseconds(0));
    if (mode == storage::DiskEngineMode::Async) std::this_thread::yield();
  }
  out.server = server.result();
  out.client = client.result();
  out.destination = dst.data();
  return out;
}

inline std::string trace_dir() {
  const char* d = std::getenv("XDFS_TRACE_DIR");
  return d ? d : "tests/traces";
}

}  // namespace testsupport
