#include "xdfs/sim.hpp"

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <deque>
#include <limits>
#include <random>

namespace xdfs::sim {

using transport::Clock;
using transport::IoResult;

namespace {

constexpr std::uint64_t kNoLimit = std::numeric_limits<std::uint64_t>::max();
constexpr std::size_t kMaxStoredTrace = 1u << 20;

struct Chunk {
  std::vector<std::uint8_t> data;
  std::size_t pos = 0;
  Clock::time_point available_at;
};

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

struct Pipe {
  std::deque<Chunk> chunks;
  std::size_t buffered = 0;
  std::size_t capacity = 0;
  std::uint64_t written = 0;
  std::uint64_t delivered = 0;
  bool writer_closed = false;
  bool reader_closed = false;
  std::uint64_t close_at = kNoLimit;
  std::uint64_t stall_at = kNoLimit;
  bool fragment = false;
  std::mt19937_64 rng;
  std::uint64_t next_boundary = kNoLimit;
  Clock::time_point link_free{};

  // Segment lengths mix header-sized and bulk-sized pieces so that both
  // 13-byte frames and block payloads get split.
  std::uint64_t draw_segment() {
    std::uint64_t r = rng();
    if (r & 1) return 1 + (r >> 1) % 16;
    return 1 + (r >> 1) % 65536;
  }

  std::uint64_t delivery_limit() const { return std::min(close_at, stall_at); }

  bool readable(Clock::time_point now) const {
    if (!chunks.empty() && chunks.front().available_at <= now && delivered < delivery_limit()) return true;
    return at_eof();
  }
  bool at_eof() const {
    if (delivered >= close_at) return true;
    return writer_closed && buffered == 0;
  }
  bool writable() const { return reader_closed || written >= close_at || buffered < capacity; }
  std::optional<Clock::time_point> next_wake(Clock::time_point now) const {
    if (!chunks.empty() && chunks.front().available_at > now && delivered < delivery_limit())
      return chunks.front().available_at;
    return std::nullopt;
  }
};

struct Connection {
  std::size_t ordinal = 0;
  Pipe c2s;
  Pipe s2c;
};

struct SimNetwork::ListenerQueue {
  std::uint16_t port = 0;
  std::deque<transport::StreamPtr> pending;
  bool closed = false;
};

class SimStream final : public transport::ChannelStream {
 public:
  SimStream(std::shared_ptr<SimNetwork> net, std::shared_ptr<Connection> conn, bool client)
      : net_(std::move(net)), conn_(std::move(conn)), client_(client) {}
  ~SimStream() override { close(); }

  IoResult read(std::span<std::uint8_t> buf) override {
    std::lock_guard lk(net_->mutex());
    if (!open_) return IoResult::error(EBADF);
    Pipe& p = in();
    if (buf.empty()) return IoResult::ok(0);
    auto now = Clock::now();
    std::uint64_t limit = p.delivery_limit();
    std::size_t total = 0;
    while (total < buf.size() && !p.chunks.empty()) {
      Chunk& c = p.chunks.front();
      if (c.available_at > now) break;
      std::uint64_t can = std::min<std::uint64_t>(buf.size() - total, c.data.size() - c.pos);
      can = std::min(can, limit - p.delivered);
      if (p.fragment) can = std::min(can, p.next_boundary - p.delivered);
      if (can == 0) break;
      std::memcpy(buf.data() + total, c.data.data() + c.pos, can);
      c.pos += can;
      p.delivered += can;
      p.buffered -= can;
      total += can;
      if (c.pos == c.data.size()) p.chunks.pop_front();
      if (p.fragment && p.delivered == p.next_boundary) {
        p.next_boundary += p.draw_segment();
        break;
      }
    }
    if (total > 0) {
      net_->record(conn_->ordinal, client_ ? Flow::ServerToClient : Flow::ClientToServer, total);
      net_->cv().notify_all();
      return IoResult::ok(total);
    }
    if (p.at_eof()) return IoResult::eof();
    return IoResult::would_block();
  }

  IoResult write(std::span<const std::uint8_t> buf) override {
    std::lock_guard lk(net_->mutex());
    if (!open_) return IoResult::error(EBADF);
    Pipe& p = out();
    if (p.reader_closed || p.written >= p.close_at) return IoResult::error(EPIPE);
    if (buf.empty()) return IoResult::ok(0);
    std::size_t space = p.capacity > p.buffered ? p.capacity - p.buffered : 0;
    std::uint64_t n = std::min<std::uint64_t>(buf.size(), space);
    n = std::min(n, p.close_at - p.written);
    if (n == 0) return IoResult::would_block();
    const auto& cfg = net_->config();
    auto now = Clock::now();
    Clock::time_point avail = now;
    if (cfg.bandwidth_cap && *cfg.bandwidth_cap > 0) {
      auto start = std::max(now, p.link_free);
      auto tx = std::chrono::duration_cast<Clock::duration>(
          std::chrono::duration<double>(static_cast<double>(n) / *cfg.bandwidth_cap));
      p.link_free = start + tx;
      avail = p.link_free;
    }
    avail += cfg.per_channel_latency;
    p.chunks.push_back(Chunk{std::vector<std::uint8_t>(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(n)), 0,
                             avail});
    p.buffered += n;
    p.written += n;
    net_->cv().notify_all();
    return IoResult::ok(n);
  }

  void close() override {
    {
      std::lock_guard lk(net_->mutex());
      if (!open_) return;
      open_ = false;
      out().writer_closed = true;
      Pipe& p = in();
      p.reader_closed = true;
      p.chunks.clear();
      p.buffered = 0;
      net_->cv().notify_all();
    }
    release_census();
  }

  bool is_open() const override {
    std::lock_guard lk(net_->mutex());
    return open_;
  }
  transport::Backend backend() const override { return transport::Backend::Sim; }

  std::size_t apply_window(std::size_t bytes) override {
    std::lock_guard lk(net_->mutex());
    if (bytes > 0) out().capacity = bytes;
    return out().capacity;
  }
  std::size_t send_buffer_size() const override {
    std::lock_guard lk(net_->mutex());
    return out().capacity;
  }
  std::size_t recv_buffer_size() const override {
    std::lock_guard lk(net_->mutex());
    return in().capacity;
  }
  std::string describe() const override {
    return std::string("sim#") + std::to_string(conn_->ordinal) + (client_ ? "/client" : "/server");
  }

  // Called with the network mutex held.
  bool open_locked() const { return open_; }
  bool readable_locked(Clock::time_point now) const { return in().readable(now); }
  bool writable_locked() const { return out().writable(); }
  std::optional<Clock::time_point> wake_locked(Clock::time_point now) const { return in().next_wake(now); }
  const SimNetwork* network() const { return net_.get(); }

 private:
  Pipe& in() { return client_ ? conn_->s2c : conn_->c2s; }
  Pipe& out() { return client_ ? conn_->c2s : conn_->s2c; }
  const Pipe& in() const { return client_ ? conn_->s2c : conn_->c2s; }
  const Pipe& out() const { return client_ ? conn_->c2s : conn_->s2c; }

  std::shared_ptr<SimNetwork> net_;
  std::shared_ptr<Connection> conn_;
  bool client_;
  bool open_ = true;
};

namespace {

class SimAcceptor final : public transport::Acceptor {
 public:
  SimAcceptor(std::shared_ptr<SimNetwork> net, std::shared_ptr<SimNetwork::ListenerQueue> q,
              std::map<std::uint16_t, std::shared_ptr<SimNetwork::ListenerQueue>>* registry)
      : net_(std::move(net)), q_(std::move(q)), registry_(registry) {}
  ~SimAcceptor() override { close(); }

  transport::StreamPtr accept(transport::milliseconds timeout) override {
    std::unique_lock lk(net_->mutex());
    net_->cv().wait_for(lk, timeout, [&] { return q_->closed || !q_->pending.empty(); });
    if (q_->closed || q_->pending.empty()) return nullptr;
    auto s = std::move(q_->pending.front());
    q_->pending.pop_front();
    return s;
  }

  transport::Endpoint local_endpoint() const override { return {"sim", q_->port}; }

  void close() override {
    std::deque<transport::StreamPtr> drop;
    {
      std::lock_guard lk(net_->mutex());
      if (q_->closed) return;
      q_->closed = true;
      drop.swap(q_->pending);
      auto it = registry_->find(q_->port);
      if (it != registry_->end() && it->second == q_) registry_->erase(it);
      net_->cv().notify_all();
    }
    drop.clear();
  }

 private:
  std::shared_ptr<SimNetwork> net_;
  std::shared_ptr<SimNetwork::ListenerQueue> q_;
  std::map<std::uint16_t, std::shared_ptr<SimNetwork::ListenerQueue>>* registry_;
};

}  // namespace

std::shared_ptr<SimNetwork> SimNetwork::create(SimNetConfig cfg) {
  return std::shared_ptr<SimNetwork>(new SimNetwork(std::move(cfg)));
}

std::shared_ptr<Connection> SimNetwork::new_connection_locked(std::size_t window) {
  auto conn = std::make_shared<Connection>();
  conn->ordinal = next_ordinal_++;
  std::size_t cap = window > 0 ? window : cfg_.buffer_capacity;
  for (Flow flow : {Flow::ClientToServer, Flow::ServerToClient}) {
    Pipe& p = flow == Flow::ClientToServer ? conn->c2s : conn->s2c;
    p.capacity = cap;
    p.fragment = cfg_.fragmentation == Fragmentation::RandomSplit;
    p.rng.seed(mix(cfg_.seed ^ mix(conn->ordinal * 2 + (flow == Flow::ServerToClient ? 1 : 0))));
    if (p.fragment) p.next_boundary = p.draw_segment();
    for (const FaultEntry& f : cfg_.fault_plan) {
      if (f.channel_index != conn->ordinal || f.flow != flow) continue;
      if (f.fault == FaultKind::Close) p.close_at = std::min(p.close_at, f.byte_position);
      if (f.fault == FaultKind::Stall) p.stall_at = std::min(p.stall_at, f.byte_position);
    }
  }
  return conn;
}

std::unique_ptr<transport::Acceptor> SimNetwork::listen(std::uint16_t port) {
  std::lock_guard lk(mu_);
  if (port == 0) {
    port = 40000;
    while (listeners_.count(port)) ++port;
  }
  if (listeners_.count(port)) throw Error(Errc::BindFailure, "sim port " + std::to_string(port) + " in use");
  auto q = std::make_shared<ListenerQueue>();
  q->port = port;
  listeners_[port] = q;
  return std::make_unique<SimAcceptor>(shared_from_this(), q, &listeners_);
}

transport::StreamPtr SimNetwork::connect(std::uint16_t port, std::size_t window) {
  std::lock_guard lk(mu_);
  auto it = listeners_.find(port);
  if (it == listeners_.end() || it->second->closed)
    throw Error(Errc::ConnectFailure, "no sim listener on port " + std::to_string(port));
  std::size_t ordinal = next_ordinal_;
  for (const FaultEntry& f : cfg_.fault_plan) {
    if (f.channel_index == ordinal && f.fault == FaultKind::Refuse) {
      ++next_ordinal_;
      throw Error(Errc::ConnectFailure, "sim connection " + std::to_string(ordinal) + " refused by fault plan");
    }
  }
  auto conn = new_connection_locked(window);
  auto self = shared_from_this();
  it->second->pending.push_back(std::make_unique<SimStream>(self, conn, false));
  cv_.notify_all();
  return std::make_unique<SimStream>(self, conn, true);
}

std::pair<std::vector<transport::StreamPtr>, std::vector<transport::StreamPtr>> SimNetwork::make_pairs(
    std::size_t n, std::size_t window) {
  std::pair<std::vector<transport::StreamPtr>, std::vector<transport::StreamPtr>> out;
  std::lock_guard lk(mu_);
  auto self = shared_from_this();
  for (std::size_t i = 0; i < n; ++i) {
    auto conn = new_connection_locked(window);
    out.first.push_back(std::make_unique<SimStream>(self, conn, true));
    out.second.push_back(std::make_unique<SimStream>(self, conn, false));
  }
  return out;
}

void SimNetwork::record(std::size_t connection, Flow flow, std::size_t bytes) {
  if (trace_.size() < kMaxStoredTrace) trace_.push_back({connection, flow, bytes});
}

std::vector<DeliveryEvent> SimNetwork::trace() const {
  std::lock_guard lk(mu_);
  return trace_;
}

std::uint64_t SimNetwork::trace_hash() const {
  std::lock_guard lk(mu_);
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto feed = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& e : trace_) {
    feed(e.connection);
    feed(e.flow == Flow::ClientToServer ? 0 : 1);
    feed(e.bytes);
  }
  return h;
}

std::size_t SimNetwork::connection_count() const {
  std::lock_guard lk(mu_);
  return next_ordinal_;
}

std::vector<transport::Readiness> SimNetwork::poll(std::span<transport::ChannelStream* const> streams,
                                                   std::span<const transport::Interest> interest,
                                                   transport::milliseconds timeout) {
  std::vector<const SimStream*> sims;
  sims.reserve(streams.size());
  for (auto* s : streams) {
    auto* sim = dynamic_cast<const SimStream*>(s);
    if (!sim || sim->network() != this) throw Error(Errc::StreamInvalid, "stream does not belong to this network");
    sims.push_back(sim);
  }
  std::unique_lock lk(mu_);
  auto deadline = Clock::now() + timeout;
  std::vector<transport::Readiness> ready;
  for (;;) {
    auto now = Clock::now();
    std::optional<Clock::time_point> wake;
    for (std::size_t i = 0; i < sims.size(); ++i) {
      if (!sims[i]->open_locked()) throw Error(Errc::StreamInvalid, "polling a closed stream");
      transport::Readiness r{i, interest[i].read && sims[i]->readable_locked(now),
                             interest[i].write && sims[i]->writable_locked()};
      if (r.readable || r.writable) ready.push_back(r);
      if (interest[i].read) {
        if (auto w = sims[i]->wake_locked(now); w && (!wake || *w < *wake)) wake = w;
      }
    }
    if (!ready.empty() || now >= deadline) return ready;
    auto until = deadline;
    if (wake && *wake < until) until = *wake;
    cv_.wait_until(lk, until);
  }
}

SimPair sim_pair(const SimNetConfig& cfg, std::size_t n) {
  SimPair p;
  p.network = SimNetwork::create(cfg);
  auto [c, s] = p.network->make_pairs(n);
  p.client = std::move(c);
  p.server = std::move(s);
  return p;
}

std::vector<transport::Readiness> poll_streams(std::span<transport::ChannelStream* const> streams,
                                               std::span<const transport::Interest> interest,
                                               transport::milliseconds timeout) {
  auto* first = dynamic_cast<const SimStream*>(streams.front());
  if (!first) throw Error(Errc::StreamInvalid, "not a simulated stream");
  return const_cast<SimNetwork*>(first->network())->poll(streams, interest, timeout);
}

transport::StreamPtr SimConnector::connect(std::size_t) { return net_->connect(port_, window_); }

}  // namespace xdfs::sim
