#include "xdfs/client.hpp"

#include <algorithm>
#include <filesystem>
#include <limits>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "xdfs/session.hpp"

namespace xdfs::client {

using transport::Clock;
using namespace std::chrono_literals;

namespace {

[[noreturn]] void usage(const std::string& msg) { throw Error(Errc::Usage, msg); }

std::uint64_t parse_count(const std::string& s, const std::string& what) {
  if (s.empty() || s.size() > 20 || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; }))
    usage("bad " + what + ": '" + s + "'");
  std::uint64_t v = 0;
  for (char c : s) {
    std::uint64_t d = static_cast<std::uint64_t>(c - '0');
    if (v > (std::numeric_limits<std::uint64_t>::max() - d) / 10) usage(what + " too large: " + s);
    v = v * 10 + d;
  }
  return v;
}

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace

Url Url::parse(const std::string& text) {
  Url u;
  if (starts_with(text, "xdfs://")) {
    u.kind = UrlKind::Xdfs;
    std::string rest = text.substr(7);
    auto slash = rest.find('/');
    if (slash == std::string::npos || slash + 1 >= rest.size()) usage("xdfs URL needs a path: " + text);
    transport::Endpoint ep;
    try {
      ep = transport::Endpoint::parse(rest.substr(0, slash));
      ep.validate();
    } catch (const Error& e) {
      usage("bad address in " + text + ": " + e.what());
    }
    u.host = ep.host;
    u.port = ep.port;
    u.path = rest.substr(slash + 1);
  } else if (starts_with(text, "file:")) {
    u.kind = UrlKind::File;
    u.path = text.substr(5);
    if (starts_with(u.path, "//")) u.path = u.path.substr(2);
    if (u.path.empty()) usage("file URL needs a path");
  } else if (starts_with(text, "zero:")) {
    u.kind = UrlKind::Zero;
    u.zero_bytes = parse_count(text.substr(5), "zero: size");
  } else if (text == "null:") {
    u.kind = UrlKind::Null;
  } else if (starts_with(text, "null:")) {
    usage("null: takes no argument");
  } else if (text.empty()) {
    usage("empty URL");
  } else if (text.find("://") != std::string::npos) {
    usage("unknown URL scheme: " + text);
  } else {
    u.kind = UrlKind::File;
    u.path = text;
  }
  return u;
}

std::string Url::to_string() const {
  switch (kind) {
    case UrlKind::Xdfs:
      return "xdfs://" + transport::Endpoint{host, port}.to_string() + "/" + path;
    case UrlKind::File:
      return "file:" + path;
    case UrlKind::Zero:
      return "zero:" + std::to_string(zero_bytes);
    case UrlKind::Null:
      return "null:";
  }
  return {};
}

ResolvedSpec resolve(const TransferSpec& spec) {
  Url src = Url::parse(spec.source_url);
  Url dst = Url::parse(spec.dest_url);
  bool rs = src.kind == UrlKind::Xdfs;
  bool rd = dst.kind == UrlKind::Xdfs;
  if (rs == rd) usage("exactly one of source and destination must be an xdfs:// URL");
  if (src.kind == UrlKind::Null) usage("null: is only valid as a destination");
  if (dst.kind == UrlKind::Zero) usage("zero: is only valid as a source");
  if (spec.parallel < 1 || spec.parallel > 65535) usage("parallel must be in 1..65535");
  if (spec.block_size < wire::kMinBlockSize || spec.block_size > wire::kMaxBlockSize)
    usage("block size must be in " + std::to_string(wire::kMinBlockSize) + ".." +
          std::to_string(wire::kMaxBlockSize));
  if (spec.tcp_window == 0) usage("tcp window must be positive");
  ResolvedSpec r;
  r.direction = rs ? wire::Direction::Download : wire::Direction::Upload;
  r.remote = rs ? src : dst;
  r.local = rs ? dst : src;
  return r;
}

double throughput_bps(std::uint64_t bytes, double seconds) {
  if (seconds <= 0) return 0;
  return 8.0 * static_cast<double>(bytes) / seconds;
}

TransferReport transfer(const TransferSpec& spec) {
  ResolvedSpec rs = resolve(spec);
  TransferReport rep;
  rep.direction = rs.direction;
  rep.parallel = spec.parallel;
  const bool download = rs.direction == wire::Direction::Download;
  auto t0 = Clock::now();
  try {
    std::unique_ptr<storage::FileStream> local;
    session::ClientParams p;
    p.session_id = wire::SessionId::generate();
    p.direction = rs.direction;
    p.channels = spec.parallel;
    p.local_file_name = rs.local.to_string();
    p.remote_file_name = rs.remote.path;
    p.tcp_window_size = spec.tcp_window;
    p.block_size = spec.block_size;
    p.credentials.assign(spec.credentials.begin(), spec.credentials.end());
    p.handshake_timeout = spec.handshake_timeout;

    if (!download) {
      local = rs.local.kind == UrlKind::Zero ? storage::zero_stream(rs.local.zero_bytes)
                                             : storage::open_stream(rs.local.path, storage::OpenMode::Read);
      p.extended_mode["size"] = std::to_string(local->size());
    } else if (rs.local.kind == UrlKind::File && !spec.force) {
      std::error_code ec;
      if (std::filesystem::exists(rs.local.path, ec))
        usage("destination " + rs.local.path + " exists (use --force to overwrite)");
    }

    std::unique_ptr<transport::Connector> conn;
    if (spec.sim_network) {
      conn = std::make_unique<sim::SimConnector>(spec.sim_network, static_cast<std::uint16_t>(rs.remote.port),
                                                 spec.tcp_window);
    } else {
      conn = std::make_unique<transport::TcpConnector>(transport::Endpoint{rs.remote.host, rs.remote.port},
                                                       spec.tcp_window);
    }
    auto cs = session::negotiate_client(*conn, p);
    rep.session_id = cs.session_id;

    piod::SessionInputs in;
    if (download) {
      local = rs.local.kind == UrlKind::Null ? storage::null_stream()
                                             : storage::open_stream(rs.local.path, storage::OpenMode::WriteCreate);
      local->resize(cs.file_size);
      in.file_size = cs.file_size;
    } else {
      in.file_size = local->size();
    }
    in.streams = std::move(cs.streams);
    in.requests = std::move(cs.requests);
    in.file = local.get();

    piod::SessionConfig cfg;
    cfg.kind = download ? fsm::MachineKind::ClientDownload : fsm::MachineKind::ClientUpload;
    cfg.engine.mode = spec.disk_mode;
    cfg.idle_timeout = spec.idle_timeout;
    cfg.record_trace = spec.record_trace;
    auto r = piod::run_session(std::move(in), cfg);
    local.reset();

    rep.success = r.success;
    rep.final_state = r.final_state;
    rep.counters = r.counters;
    rep.per_channel = r.counters.channels;
    rep.bytes_transferred = r.counters.payload_bytes;
    rep.trace = std::move(r.trace);
    if (!r.success) {
      rep.error = r.error.empty() ? "session ended in " + r.final_state : r.error;
      rep.code = Errc::TransferFailed;
    }
  } catch (const Error& e) {
    if (e.code() == Errc::Usage) throw;
    rep.success = false;
    rep.error = e.what();
    rep.code = e.code();
  }
  rep.wall_time = std::chrono::duration<double>(Clock::now() - t0).count();
  rep.throughput = rep.success ? throughput_bps(rep.bytes_transferred, rep.wall_time) : 0;
  return rep;
}

std::vector<std::uint32_t> parse_sweep(const std::string& text) {
  std::vector<std::uint32_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), [](char c) { return c == ' '; }), item.end());
    auto v = parse_count(item, "sweep entry");
    if (v < 1 || v > 65535) usage("sweep entry out of range: " + item);
    out.push_back(static_cast<std::uint32_t>(v));
  }
  if (out.empty()) usage("empty sweep");
  return out;
}

BenchResult bench(TransferSpec spec, std::size_t repeats, const std::vector<std::uint32_t>& sweep,
                  const std::function<void(const BenchRow&)>& on_row) {
  if (repeats < 1) usage("repeats must be at least 1");
  auto rs = resolve(spec);
  std::vector<std::uint32_t> ns = sweep.empty() ? std::vector<std::uint32_t>{spec.parallel} : sweep;
  BenchResult res;
  for (auto n : ns) {
    spec.parallel = n;
    BenchRow row;
    row.source = spec.source_url;
    row.dest = spec.dest_url;
    row.direction = rs.direction;
    row.parallel = n;
    row.block_size = spec.block_size;
    row.tcp_window = spec.tcp_window;
    row.disk_mode = storage::to_string(spec.disk_mode);
    row.repeats = repeats;
    double sum = 0, wall = 0;
    for (std::size_t k = 0; k < repeats; ++k) {
      auto rep = transfer(spec);
      if (!rep.success) {
        res.success = false;
        res.error = rep.error;
        res.code = rep.code;
        return res;
      }
      row.bytes = rep.bytes_transferred;
      row.min_bps = k == 0 ? rep.throughput : std::min(row.min_bps, rep.throughput);
      row.max_bps = std::max(row.max_bps, rep.throughput);
      sum += rep.throughput;
      wall += rep.wall_time;
    }
    row.mean_bps = sum / static_cast<double>(repeats);
    row.mean_wall = wall / static_cast<double>(repeats);
    res.rows.push_back(row);
    if (on_row) on_row(row);
  }
  return res;
}

std::string to_json(const BenchRow& r) {
  nlohmann::ordered_json j;
  j["source"] = r.source;
  j["dest"] = r.dest;
  j["direction"] = wire::to_string(r.direction);
  j["parallel"] = r.parallel;
  j["block_size"] = r.block_size;
  j["tcp_window"] = r.tcp_window;
  j["disk_mode"] = r.disk_mode;
  j["repeats"] = r.repeats;
  j["bytes"] = r.bytes;
  j["mean_bps"] = r.mean_bps;
  j["min_bps"] = r.min_bps;
  j["max_bps"] = r.max_bps;
  j["mean_wall_s"] = r.mean_wall;
  return j.dump();
}

std::string csv_header() {
  return "source,dest,direction,parallel,block_size,tcp_window,disk_mode,repeats,bytes,mean_bps,min_bps,max_bps,"
         "mean_wall_s";
}

std::string to_csv(const BenchRow& r) {
  auto q = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string o = "\"";
    for (char c : s) {
      if (c == '"') o += '"';
      o += c;
    }
    return o + "\"";
  };
  std::ostringstream o;
  o.precision(17);
  o << q(r.source) << ',' << q(r.dest) << ',' << wire::to_string(r.direction) << ',' << r.parallel << ','
    << r.block_size << ',' << r.tcp_window << ',' << r.disk_mode << ',' << r.repeats << ',' << r.bytes << ','
    << r.mean_bps << ',' << r.min_bps << ',' << r.max_bps << ',' << r.mean_wall;
  return o.str();
}

double raw_socket_baseline(std::uint64_t bytes, std::size_t chunk, std::size_t window) {
  auto acc = transport::listen(transport::Endpoint{"127.0.0.1", 0});
  auto ep = acc->local_endpoint();
  std::exception_ptr failure;
  std::thread writer([&] {
    try {
      auto s = acc->accept(10s);
      if (!s) throw Error(Errc::Timeout, "baseline peer never connected");
      s->apply_window(window);
      std::vector<std::uint8_t> buf(chunk, 0);
      std::uint64_t left = bytes;
      while (left > 0) {
        std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(left, chunk));
        transport::write_all(*s, std::span(buf.data(), n), Clock::now() + 60s);
        left -= n;
      }
      s->close();
    } catch (...) {
      failure = std::current_exception();
    }
  });
  auto t0 = Clock::now();
  std::uint64_t got = 0;
  try {
    auto c = transport::connect(ep, window);
    std::vector<std::uint8_t> buf(chunk);
    transport::ChannelStream* ps[] = {c.get()};
    transport::Interest in[] = {{true, false}};
    for (;;) {
      auto r = c->read(buf);
      if (r.status == transport::IoResult::Status::Ok) {
        got += r.bytes;
      } else if (r.status == transport::IoResult::Status::WouldBlock) {
        transport::poll_readiness(ps, in, 1000ms);
      } else {
        break;
      }
    }
    c->close();
  } catch (...) {
    writer.join();
    throw;
  }
  auto wall = std::chrono::duration<double>(Clock::now() - t0).count();
  writer.join();
  acc->close();
  if (failure) std::rethrow_exception(failure);
  if (got != bytes) throw Error(Errc::TransferFailed, "baseline moved " + std::to_string(got) + " bytes");
  return throughput_bps(bytes, wall);
}

}  // namespace xdfs::client
