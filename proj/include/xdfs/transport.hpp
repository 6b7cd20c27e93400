#pragma once

// Byte-stream transport beneath every channel. Two backends share the
// ChannelStream interface: nonblocking TCP sockets and the deterministic
// in-memory simulator in sim.hpp. All blocking waits go through
// poll_readiness, which is level-triggered.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xdfs/error.hpp"
#include "xdfs/wire.hpp"

namespace xdfs::transport {

using Clock = std::chrono::steady_clock;
using std::chrono::milliseconds;

struct Endpoint {
  std::string host;
  int port = 0;

  // "host:port", "[v6addr]:port"
  static Endpoint parse(std::string_view text);
  void validate() const;
  std::string to_string() const;
};

enum class Backend { Tcp, Sim };

struct IoResult {
  enum class Status { Ok, WouldBlock, Eof, Error };
  Status status = Status::Ok;
  std::size_t bytes = 0;
  int error_code = 0;

  static IoResult ok(std::size_t n) { return {Status::Ok, n, 0}; }
  static IoResult would_block() { return {Status::WouldBlock, 0, 0}; }
  static IoResult eof() { return {Status::Eof, 0, 0}; }
  static IoResult error(int code) { return {Status::Error, 0, code}; }
};

class ChannelStream {
 public:
  ChannelStream();
  virtual ~ChannelStream();
  ChannelStream(const ChannelStream&) = delete;
  ChannelStream& operator=(const ChannelStream&) = delete;

  // Reads 0..buf.size() bytes. Eof only after an orderly peer close with all
  // data consumed.
  virtual IoResult read(std::span<std::uint8_t> buf) = 0;
  virtual IoResult write(std::span<const std::uint8_t> buf) = 0;
  virtual IoResult write_vectored(std::span<const std::span<const std::uint8_t>> bufs);
  virtual void close() = 0;
  virtual bool is_open() const = 0;
  virtual Backend backend() const = 0;

  // Best effort; returns the size the backend actually applied.
  virtual std::size_t apply_window(std::size_t bytes) = 0;
  virtual std::size_t send_buffer_size() const = 0;
  virtual std::size_t recv_buffer_size() const = 0;
  virtual std::string describe() const = 0;

  // Connection census: streams constructed and not yet closed, process-wide.
  static std::size_t open_count() noexcept;

 protected:
  void release_census() noexcept;

 private:
  bool counted_ = true;
};

using StreamPtr = std::unique_ptr<ChannelStream>;

class Acceptor {
 public:
  virtual ~Acceptor() = default;
  // nullptr when nothing arrived within timeout.
  virtual StreamPtr accept(milliseconds timeout) = 0;
  virtual Endpoint local_endpoint() const = 0;
  virtual void close() = 0;
};

class Connector {
 public:
  virtual ~Connector() = default;
  virtual StreamPtr connect(std::size_t channel_index) = 0;
};

std::unique_ptr<Acceptor> listen(const Endpoint& ep);
StreamPtr connect(const Endpoint& ep, std::size_t window, milliseconds timeout = milliseconds(10000));

class TcpConnector : public Connector {
 public:
  TcpConnector(Endpoint ep, std::size_t window, milliseconds timeout = milliseconds(10000))
      : ep_(std::move(ep)), window_(window), timeout_(timeout) {}
  StreamPtr connect(std::size_t channel_index) override;

 private:
  Endpoint ep_;
  std::size_t window_;
  milliseconds timeout_;
};

struct Interest {
  bool read = false;
  bool write = false;
};

struct Readiness {
  std::size_t index = 0;  // position in the polled list
  bool readable = false;
  bool writable = false;
};

// Returns the streams ready for their requested interest, or an empty report
// once timeout elapses. All streams must share one backend (and, for the
// simulator, one network); otherwise StreamInvalid.
std::vector<Readiness> poll_readiness(std::span<ChannelStream* const> streams, std::span<const Interest> interest,
                                      milliseconds timeout);

// Blocking helpers used during the handshake, built on poll_readiness.
void write_all(ChannelStream& s, wire::ByteView data, Clock::time_point deadline);
void read_exact(ChannelStream& s, std::span<std::uint8_t> out, Clock::time_point deadline);

// Reads one length-discoverable frame without consuming bytes past its end.
// `peek` is one of the wire::peek_*_size functions.
wire::Bytes read_frame(ChannelStream& s, wire::FrameProbe (*peek)(wire::ByteView), Clock::time_point deadline);

}  // namespace xdfs::transport
