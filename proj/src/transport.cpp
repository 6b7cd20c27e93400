#include "xdfs/transport.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/uio.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>

#include "xdfs/sim.hpp"

namespace xdfs::transport {

namespace {

std::atomic<std::size_t> g_open_streams{0};

std::string errno_text(int err) { return std::strerror(err); }

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  ~Fd() { reset(); }
  Fd(Fd&& o) noexcept : fd_(o.release()) {}
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = o.release();
    }
    return *this;
  }
  int get() const { return fd_; }
  int release() { return std::exchange(fd_, -1); }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

void set_nonblocking(int fd) {
  int flags = ::fcntl(fd, F_GETFL, 0);
  if (flags < 0 || ::fcntl(fd, F_SETFL, flags | O_NONBLOCK) < 0)
    throw Error(Errc::IoFailure, "fcntl(O_NONBLOCK): " + errno_text(errno));
}

std::size_t sockopt_size(int fd, int opt) {
  int v = 0;
  socklen_t len = sizeof(v);
  if (::getsockopt(fd, SOL_SOCKET, opt, &v, &len) != 0) return 0;
  return static_cast<std::size_t>(v);
}

void set_buffers(int fd, std::size_t window) {
  if (window == 0) return;
  int v = static_cast<int>(std::min<std::size_t>(window, 1u << 30));
  ::setsockopt(fd, SOL_SOCKET, SO_SNDBUF, &v, sizeof(v));
  ::setsockopt(fd, SOL_SOCKET, SO_RCVBUF, &v, sizeof(v));
}

// Channel headers are 13 bytes; coalescing delays would stall every ack.
void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

std::string addr_text(const sockaddr_storage& ss) {
  char host[NI_MAXHOST] = {0};
  char serv[NI_MAXSERV] = {0};
  if (::getnameinfo(reinterpret_cast<const sockaddr*>(&ss), sizeof(ss), host, sizeof(host), serv, sizeof(serv),
                    NI_NUMERICHOST | NI_NUMERICSERV) != 0)
    return "?";
  return std::string(host) + ":" + serv;
}

struct AddrInfo {
  addrinfo* head = nullptr;
  ~AddrInfo() {
    if (head) ::freeaddrinfo(head);
  }
};

void resolve(const Endpoint& ep, bool passive, AddrInfo& out, Errc failure) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = passive ? AI_PASSIVE : 0;
  std::string port = std::to_string(ep.port);
  int rc = ::getaddrinfo(ep.host.empty() ? nullptr : ep.host.c_str(), port.c_str(), &hints, &out.head);
  if (rc != 0) throw Error(failure, "resolve " + ep.to_string() + ": " + ::gai_strerror(rc));
}

class TcpStream final : public ChannelStream {
 public:
  explicit TcpStream(Fd fd) : fd_(std::move(fd)) {
    sockaddr_storage ss{};
    socklen_t len = sizeof(ss);
    if (::getpeername(fd_.get(), reinterpret_cast<sockaddr*>(&ss), &len) == 0) peer_ = addr_text(ss);
  }
  ~TcpStream() override { close(); }

  IoResult read(std::span<std::uint8_t> buf) override {
    if (fd_.get() < 0) return IoResult::error(EBADF);
    for (;;) {
      ssize_t n = ::recv(fd_.get(), buf.data(), buf.size(), 0);
      if (n > 0) return IoResult::ok(static_cast<std::size_t>(n));
      if (n == 0) return buf.empty() ? IoResult::ok(0) : IoResult::eof();
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK) return IoResult::would_block();
      return IoResult::error(errno);
    }
  }

  IoResult write(std::span<const std::uint8_t> buf) override {
    if (fd_.get() < 0) return IoResult::error(EBADF);
    for (;;) {
      ssize_t n = ::send(fd_.get(), buf.data(), buf.size(), MSG_NOSIGNAL);
      if (n >= 0) return IoResult::ok(static_cast<std::size_t>(n));
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK) return IoResult::would_block();
      return IoResult::error(errno);
    }
  }

  IoResult write_vectored(std::span<const std::span<const std::uint8_t>> bufs) override {
    if (fd_.get() < 0) return IoResult::error(EBADF);
    iovec iov[16];
    std::size_t cnt = std::min<std::size_t>(bufs.size(), 16);
    for (std::size_t i = 0; i < cnt; ++i) {
      iov[i].iov_base = const_cast<std::uint8_t*>(bufs[i].data());
      iov[i].iov_len = bufs[i].size();
    }
    msghdr msg{};
    msg.msg_iov = iov;
    msg.msg_iovlen = cnt;
    for (;;) {
      ssize_t n = ::sendmsg(fd_.get(), &msg, MSG_NOSIGNAL);
      if (n >= 0) return IoResult::ok(static_cast<std::size_t>(n));
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK) return IoResult::would_block();
      return IoResult::error(errno);
    }
  }

  void close() override {
    if (fd_.get() < 0) return;
    fd_.reset();
    release_census();
  }
  bool is_open() const override { return fd_.get() >= 0; }
  Backend backend() const override { return Backend::Tcp; }

  std::size_t apply_window(std::size_t bytes) override {
    if (fd_.get() >= 0) set_buffers(fd_.get(), bytes);
    return send_buffer_size();
  }
  std::size_t send_buffer_size() const override { return fd_.get() >= 0 ? sockopt_size(fd_.get(), SO_SNDBUF) : 0; }
  std::size_t recv_buffer_size() const override { return fd_.get() >= 0 ? sockopt_size(fd_.get(), SO_RCVBUF) : 0; }
  std::string describe() const override { return "tcp:" + peer_; }

  int native() const { return fd_.get(); }

 private:
  Fd fd_;
  std::string peer_;
};

class TcpAcceptor final : public Acceptor {
 public:
  TcpAcceptor(Fd fd, Endpoint local) : fd_(std::move(fd)), local_(std::move(local)) {}

  StreamPtr accept(milliseconds timeout) override {
    if (fd_.get() < 0) return nullptr;
    pollfd p{fd_.get(), POLLIN, 0};
    int rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (rc <= 0) return nullptr;
    int c = ::accept4(fd_.get(), nullptr, nullptr, SOCK_NONBLOCK | SOCK_CLOEXEC);
    if (c < 0) return nullptr;
    Fd cfd(c);
    set_nodelay(cfd.get());
    return std::make_unique<TcpStream>(std::move(cfd));
  }

  Endpoint local_endpoint() const override { return local_; }
  void close() override { fd_.reset(); }

 private:
  Fd fd_;
  Endpoint local_;
};

std::vector<Readiness> poll_tcp(std::span<ChannelStream* const> streams, std::span<const Interest> interest,
                                milliseconds timeout) {
  std::vector<pollfd> fds(streams.size());
  for (std::size_t i = 0; i < streams.size(); ++i) {
    auto* tcp = dynamic_cast<TcpStream*>(streams[i]);
    if (!tcp || tcp->native() < 0) throw Error(Errc::StreamInvalid, "polling a closed or foreign stream");
    fds[i].fd = tcp->native();
    fds[i].events = static_cast<short>((interest[i].read ? POLLIN : 0) | (interest[i].write ? POLLOUT : 0));
    // A stream with no interest still reports hangups; mask them out below.
    if (fds[i].events == 0) fds[i].fd = -1;
  }
  auto deadline = Clock::now() + timeout;
  for (;;) {
    auto left = std::chrono::ceil<milliseconds>(deadline - Clock::now());
    int rc = ::poll(fds.data(), fds.size(), static_cast<int>(std::max<milliseconds::rep>(left.count(), 0)));
    if (rc < 0) {
      if (errno == EINTR) continue;
      throw Error(Errc::StreamInvalid, "poll: " + errno_text(errno));
    }
    if (rc == 0 && Clock::now() < deadline) continue;
    std::vector<Readiness> out;
    for (std::size_t i = 0; i < fds.size(); ++i) {
      if (fds[i].fd < 0) continue;
      short re = fds[i].revents;
      if (re & POLLNVAL) throw Error(Errc::StreamInvalid, "poll reported an invalid descriptor");
      bool hup = (re & (POLLHUP | POLLERR)) != 0;
      Readiness r{i, interest[i].read && ((re & POLLIN) || hup), interest[i].write && ((re & POLLOUT) || hup)};
      if (r.readable || r.writable) out.push_back(r);
    }
    return out;
  }
}

}  // namespace

// ------------------------------------------------------------------ Endpoint

Endpoint Endpoint::parse(std::string_view text) {
  Endpoint ep;
  std::size_t colon;
  if (!text.empty() && text.front() == '[') {
    auto close = text.find(']');
    if (close == std::string_view::npos || close + 1 >= text.size() || text[close + 1] != ':')
      throw Error(Errc::Usage, "bad endpoint '" + std::string(text) + "'");
    ep.host = std::string(text.substr(1, close - 1));
    colon = close + 1;
  } else {
    colon = text.rfind(':');
    if (colon == std::string_view::npos) throw Error(Errc::Usage, "endpoint needs HOST:PORT");
    ep.host = std::string(text.substr(0, colon));
  }
  std::string port(text.substr(colon + 1));
  try {
    std::size_t used = 0;
    ep.port = std::stoi(port, &used);
    if (used != port.size()) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw Error(Errc::Usage, "bad port '" + port + "'");
  }
  ep.validate();
  return ep;
}

void Endpoint::validate() const {
  if (host.empty()) throw Error(Errc::Usage, "endpoint host is empty");
  if (port < 1 || port > 65535) throw Error(Errc::Usage, "port out of range: " + std::to_string(port));
}

std::string Endpoint::to_string() const {
  if (host.find(':') != std::string::npos) return "[" + host + "]:" + std::to_string(port);
  return host + ":" + std::to_string(port);
}

// ------------------------------------------------------------- ChannelStream

ChannelStream::ChannelStream() { g_open_streams.fetch_add(1, std::memory_order_relaxed); }

ChannelStream::~ChannelStream() { release_census(); }

void ChannelStream::release_census() noexcept {
  if (counted_) {
    counted_ = false;
    g_open_streams.fetch_sub(1, std::memory_order_relaxed);
  }
}

std::size_t ChannelStream::open_count() noexcept { return g_open_streams.load(std::memory_order_relaxed); }

IoResult ChannelStream::write_vectored(std::span<const std::span<const std::uint8_t>> bufs) {
  std::size_t total = 0;
  for (auto b : bufs) {
    IoResult r = write(b);
    if (r.status != IoResult::Status::Ok) return total > 0 ? IoResult::ok(total) : r;
    total += r.bytes;
    if (r.bytes < b.size()) break;
  }
  return IoResult::ok(total);
}

// ---------------------------------------------------------------------- TCP

std::unique_ptr<Acceptor> listen(const Endpoint& ep) {
  if (ep.port < 0 || ep.port > 65535) throw Error(Errc::BindFailure, "port out of range");
  AddrInfo ai;
  resolve(ep, true, ai, Errc::BindFailure);
  int last_err = 0;
  for (addrinfo* a = ai.head; a; a = a->ai_next) {
    Fd fd(::socket(a->ai_family, a->ai_socktype | SOCK_CLOEXEC, a->ai_protocol));
    if (fd.get() < 0) {
      last_err = errno;
      continue;
    }
    int one = 1;
    ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    if (::bind(fd.get(), a->ai_addr, a->ai_addrlen) != 0 || ::listen(fd.get(), 128) != 0) {
      last_err = errno;
      continue;
    }
    sockaddr_storage ss{};
    socklen_t len = sizeof(ss);
    ::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&ss), &len);
    Endpoint local = ep;
    local.port = ss.ss_family == AF_INET6 ? ntohs(reinterpret_cast<sockaddr_in6*>(&ss)->sin6_port)
                                          : ntohs(reinterpret_cast<sockaddr_in*>(&ss)->sin_port);
    return std::make_unique<TcpAcceptor>(std::move(fd), local);
  }
  throw Error(Errc::BindFailure, "bind " + ep.to_string() + ": " + errno_text(last_err));
}

StreamPtr connect(const Endpoint& ep, std::size_t window, milliseconds timeout) {
  AddrInfo ai;
  resolve(ep, false, ai, Errc::ConnectFailure);
  auto deadline = Clock::now() + timeout;
  std::string last = "no addresses";
  bool timed_out = false;
  for (addrinfo* a = ai.head; a; a = a->ai_next) {
    Fd fd(::socket(a->ai_family, a->ai_socktype | SOCK_CLOEXEC, a->ai_protocol));
    if (fd.get() < 0) {
      last = errno_text(errno);
      continue;
    }
    set_buffers(fd.get(), window);
    set_nodelay(fd.get());
    set_nonblocking(fd.get());
    int rc = ::connect(fd.get(), a->ai_addr, a->ai_addrlen);
    if (rc != 0 && errno != EINPROGRESS) {
      last = errno_text(errno);
      continue;
    }
    if (rc != 0) {
      pollfd p{fd.get(), POLLOUT, 0};
      auto left = std::chrono::duration_cast<milliseconds>(deadline - Clock::now()).count();
      int prc;
      do {
        prc = ::poll(&p, 1, static_cast<int>(std::max<long>(left, 0)));
      } while (prc < 0 && errno == EINTR);
      if (prc == 0) {
        timed_out = true;
        last = "timed out";
        continue;
      }
      int err = 0;
      socklen_t len = sizeof(err);
      ::getsockopt(fd.get(), SOL_SOCKET, SO_ERROR, &err, &len);
      if (err != 0) {
        last = errno_text(err);
        continue;
      }
    }
    return std::make_unique<TcpStream>(std::move(fd));
  }
  throw Error(timed_out ? Errc::Timeout : Errc::ConnectFailure, "connect " + ep.to_string() + ": " + last);
}

StreamPtr TcpConnector::connect(std::size_t) { return transport::connect(ep_, window_, timeout_); }

// ------------------------------------------------------------------- polling

std::vector<Readiness> poll_readiness(std::span<ChannelStream* const> streams, std::span<const Interest> interest,
                                      milliseconds timeout) {
  if (streams.empty()) throw Error(Errc::StreamInvalid, "poll over an empty stream list");
  if (interest.size() != streams.size()) throw Error(Errc::StreamInvalid, "interest list size mismatch");
  Backend b = streams[0]->backend();
  for (auto* s : streams) {
    if (!s || s->backend() != b) throw Error(Errc::StreamInvalid, "mixed transport backends in one poll");
  }
  if (b == Backend::Tcp) return poll_tcp(streams, interest, timeout);
  return sim::poll_streams(streams, interest, timeout);
}

// ---------------------------------------------------------- blocking helpers

namespace {

milliseconds remaining(Clock::time_point deadline) {
  auto left = std::chrono::duration_cast<milliseconds>(deadline - Clock::now());
  return left.count() > 0 ? left : milliseconds(0);
}

void wait_ready(ChannelStream& s, bool for_write, Clock::time_point deadline) {
  ChannelStream* list[] = {&s};
  Interest in[] = {{!for_write, for_write}};
  for (;;) {
    if (!poll_readiness(list, in, remaining(deadline)).empty()) return;
    if (Clock::now() >= deadline) throw Error(Errc::Timeout, "handshake timed out on " + s.describe());
  }
}

}  // namespace

void write_all(ChannelStream& s, wire::ByteView data, Clock::time_point deadline) {
  std::size_t done = 0;
  while (done < data.size()) {
    IoResult r = s.write(data.subspan(done));
    switch (r.status) {
      case IoResult::Status::Ok: done += r.bytes; break;
      case IoResult::Status::WouldBlock: wait_ready(s, true, deadline); break;
      case IoResult::Status::Eof:
      case IoResult::Status::Error:
        throw Error(Errc::IoFailure, "write to " + s.describe() + ": " + errno_text(r.error_code));
    }
  }
}

void read_exact(ChannelStream& s, std::span<std::uint8_t> out, Clock::time_point deadline) {
  std::size_t done = 0;
  while (done < out.size()) {
    IoResult r = s.read(out.subspan(done));
    switch (r.status) {
      case IoResult::Status::Ok: done += r.bytes; break;
      case IoResult::Status::WouldBlock: wait_ready(s, false, deadline); break;
      case IoResult::Status::Eof: throw Error(Errc::IoFailure, "peer closed " + s.describe());
      case IoResult::Status::Error:
        throw Error(Errc::IoFailure, "read from " + s.describe() + ": " + errno_text(r.error_code));
    }
  }
}

wire::Bytes read_frame(ChannelStream& s, wire::FrameProbe (*peek)(wire::ByteView), Clock::time_point deadline) {
  wire::Bytes buf;
  for (;;) {
    wire::FrameProbe probe = peek(buf);
    if (probe.known && buf.size() == probe.size) return buf;
    std::size_t have = buf.size();
    buf.resize(std::max(probe.size, have + 1));
    read_exact(s, std::span<std::uint8_t>(buf).subspan(have), deadline);
  }
}

}  // namespace xdfs::transport
