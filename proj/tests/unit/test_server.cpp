#include <doctest.h>

#include <fstream>
#include <iterator>
#include <future>
#include <thread>

#include "../support.hpp"
#include "xdfs/client.hpp"
#include "xdfs/server.hpp"
#include "xdfs/session.hpp"

using namespace xdfs;
using namespace std::chrono_literals;
using testsupport::random_bytes;
using testsupport::read_file;
using testsupport::write_file;

namespace {

std::optional<Errc> code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

bool wait_for(const std::function<bool()>& pred, std::chrono::milliseconds limit = 5000ms) {
  auto end = std::chrono::steady_clock::now() + limit;
  while (std::chrono::steady_clock::now() < end) {
    if (pred()) return true;
    std::this_thread::sleep_for(2ms);
  }
  return pred();
}

struct Fixture {
  testsupport::TempDir root;
  testsupport::TempDir local;
  std::shared_ptr<sim::SimNetwork> net;
  std::unique_ptr<server::Server> srv;

  explicit Fixture(sim::SimNetConfig ncfg = {}, storage::DiskEngineMode mode = storage::DiskEngineMode::Sync,
                   std::function<void(server::ServerConfig&)> tweak = {}) {
    net = sim::SimNetwork::create(std::move(ncfg));
    server::ServerConfig cfg;
    cfg.root_dir = root.path().string();
    cfg.sim_network = net;
    cfg.sim_port = 9000;
    cfg.disk_mode = mode;
    cfg.log_level = "off";
    if (tweak) tweak(cfg);
    srv = server::Server::serve(cfg);
  }

  client::TransferSpec spec(const std::string& src, const std::string& dst, std::uint32_t n) {
    client::TransferSpec s;
    s.source_url = src;
    s.dest_url = dst;
    s.parallel = n;
    s.block_size = 4096;
    s.sim_network = net;
    s.idle_timeout = 5000ms;
    s.handshake_timeout = 5000ms;
    return s;
  }
  std::string remote(const std::string& name) { return "xdfs://sim:9000/" + name; }
  std::string localf(const std::string& name) { return (local.path() / name).string(); }
};

wire::Bytes read_reply(transport::ChannelStream& s, std::chrono::milliseconds limit = 3000ms) {
  wire::Bytes buf;
  auto end = std::chrono::steady_clock::now() + limit;
  while (std::chrono::steady_clock::now() < end) {
    auto p = wire::peek_reply_size(buf);
    if (p.known && buf.size() >= p.size) return buf;
    std::uint8_t tmp[256];
    std::size_t want = std::min<std::size_t>(sizeof tmp, p.size > buf.size() ? p.size - buf.size() : 1);
    auto r = s.read({tmp, want});
    if (r.status == transport::IoResult::Status::Ok && r.bytes) buf.insert(buf.end(), tmp, tmp + r.bytes);
    else if (r.status == transport::IoResult::Status::Eof) break;
    else std::this_thread::sleep_for(1ms);
  }
  return buf;
}

bool sees_eof(transport::ChannelStream& s, std::chrono::milliseconds limit = 3000ms) {
  auto end = std::chrono::steady_clock::now() + limit;
  std::uint8_t tmp[64];
  while (std::chrono::steady_clock::now() < end) {
    auto r = s.read(tmp);
    if (r.status == transport::IoResult::Status::Eof || r.status == transport::IoResult::Status::Error) return true;
    std::this_thread::sleep_for(1ms);
  }
  return false;
}

}  // namespace

TEST_CASE("config validation") {
  testsupport::TempDir root;
  server::ServerConfig cfg;
  cfg.root_dir = root.path().string();
  cfg.bind = {"127.0.0.1", 0};
  CHECK_NOTHROW(server::validate(cfg));
  auto bad = cfg;
  bad.root_dir = (root.path() / "nope").string();
  CHECK(code_of([&] { server::validate(bad); }) == Errc::NotFound);
  bad = cfg;
  bad.bind = {"", 9000};
  CHECK(code_of([&] { server::validate(bad); }) == Errc::Usage);
  bad.bind = {"127.0.0.1", 70000};
  CHECK(code_of([&] { server::validate(bad); }) == Errc::Usage);
  bad = cfg;
  bad.max_sessions = 0;
  CHECK(code_of([&] { server::validate(bad); }) == Errc::Usage);
}

TEST_CASE("path confinement") {
  CHECK(server::resolve_under_root("/srv/data", "a/b.bin") == "/srv/data/a/b.bin");
  CHECK(server::resolve_under_root("/srv/data", "/a.bin") == "/srv/data/a.bin");
  for (const char* bad : {"../x", "a/../../x", "..", "", "a/.."}) {
    INFO(bad);
    CHECK(code_of([&] { server::resolve_under_root("/srv/data", bad); }) == Errc::PermissionDenied);
  }
  CHECK(server::resolve_under_root("/srv/data", "d\xc3\xa9j\xc3\xa0.bin") == "/srv/data/d\xc3\xa9j\xc3\xa0.bin");
}

TEST_CASE("start and stop with no clients leaves no threads") {
  testsupport::TempDir root;
  server::ServerConfig cfg;
  cfg.root_dir = root.path().string();
  cfg.bind = {"127.0.0.1", 0};
  cfg.log_level = "off";
  auto srv = server::Server::serve(cfg);
  CHECK(srv->endpoint().port != 0);
  CHECK(srv->live_threads() == 3);
  auto t0 = std::chrono::steady_clock::now();
  auto m = srv->shutdown(10000ms);
  CHECK(std::chrono::steady_clock::now() - t0 < 2000ms);
  CHECK(srv->live_threads() == 0);
  CHECK(m.active_sessions == 0);
  CHECK(m.completed_sessions == 0);
}

TEST_CASE("binding a port in use fails with BindFailure") {
  testsupport::TempDir root;
  server::ServerConfig cfg;
  cfg.root_dir = root.path().string();
  cfg.bind = {"127.0.0.1", 0};
  cfg.log_level = "off";
  auto a = server::Server::serve(cfg);
  cfg.bind.port = a->endpoint().port;
  CHECK(code_of([&] { server::Server::serve(cfg); }) == Errc::BindFailure);
}

TEST_CASE("an n=4 session shows one session thread, plus one disk thread in async mode") {
  for (auto mode : {storage::DiskEngineMode::Sync, storage::DiskEngineMode::Async}) {
    sim::SimNetConfig net;
    net.bandwidth_cap = 2e6;
    Fixture f(net, mode);
    // upload keeps the server's disk writer alive for the whole session
    auto fut = std::async(std::launch::async, [&] {
      return client::transfer(f.spec("zero:1048576", f.remote("up.bin"), 4));
    });
    REQUIRE(wait_for([&] { return f.srv->metrics().active_sessions == 1; }));
    auto m = f.srv->metrics();
    std::size_t disk = mode == storage::DiskEngineMode::Async ? 1 : 0;
    CHECK(m.active_sessions == 1);
    CHECK(m.session_thread_count == 1);
    CHECK(m.disk_thread_count == disk);
    CHECK(m.live_threads == 3 + 1 + disk);
    CHECK(f.srv->live_threads() == 3 + 1 + disk);
    auto rep = fut.get();
    CHECK(rep.success);
    REQUIRE(wait_for([&] { return f.srv->metrics().completed_sessions == 1; }));
    m = f.srv->metrics();
    CHECK(m.active_sessions == 0);
    CHECK(m.session_thread_count == 0);
    // the finished session thread unwinds right after publishing its result
    CHECK(wait_for([&] { return f.srv->metrics().live_threads == 3; }));
    CHECK(m.total_bytes_in >= (1u << 20));
    f.srv->shutdown(1000ms);
    CHECK(f.srv->live_threads() == 0);
  }
}

TEST_CASE("download and upload through the server are byte-exact") {
  Fixture f;
  auto data = random_bytes(700000, 2);
  write_file(f.root.path() / "src.bin", data);
  auto rep = client::transfer(f.spec(f.remote("src.bin"), f.localf("got.bin"), 3));
  REQUIRE(rep.success);
  CHECK(read_file(f.localf("got.bin")) == data);
  rep = client::transfer(f.spec(f.localf("got.bin"), f.remote("back.bin"), 5));
  REQUIRE(rep.success);
  REQUIRE(wait_for([&] { return f.srv->metrics().completed_sessions == 2; }));
  CHECK(read_file(f.root.path() / "back.bin") == data);
}

TEST_CASE("unimplemented service modes are rejected by name and the connection closed") {
  Fixture f;
  for (auto mode : {wire::ChannelEvent::XPATHM, wire::ChannelEvent::ZXDFS}) {
    auto req = testsupport::make_requests(wire::Direction::Download, 1, 4096)[0];
    auto frame = wire::encode_negotiation(req);
    frame[6] = static_cast<std::uint8_t>(mode);
    auto s = f.net->connect(9000, 0);
    REQUIRE(s);
    transport::write_all(*s, frame, transport::Clock::now() + 2000ms);
    auto buf = read_reply(*s);
    auto reply = wire::decode_reply(buf);
    CHECK(reply.status == wire::ReplyStatus::Rejected);
    CHECK(reply.reason.find("mode not implemented") != std::string::npos);
    CHECK(reply.reason.find(wire::to_string(mode)) != std::string::npos);
    CHECK(sees_eof(*s));
  }
  CHECK(f.srv->metrics().rejected_channels == 2);
}

TEST_CASE("traversal and missing files are rejected") {
  Fixture f;
  auto rep = client::transfer(f.spec(f.remote("../etc/passwd"), "null:", 1));
  CHECK_FALSE(rep.success);
  CHECK(rep.code == Errc::PermissionDenied);
  rep = client::transfer(f.spec(f.remote("missing.bin"), "null:", 2));
  CHECK_FALSE(rep.success);
  CHECK(rep.code == Errc::NotFound);
  CHECK(f.srv->live_threads() == 3);
}

TEST_CASE("a half-filled session expires after the fill timeout") {
  Fixture f({}, storage::DiskEngineMode::Sync, [](server::ServerConfig& c) { c.fill_timeout = 200ms; });
  write_file(f.root.path() / "a.bin", random_bytes(10000, 3));
  auto req = testsupport::make_requests(wire::Direction::Download, 2, 4096)[0];
  req.remote_file_name = "a.bin";
  auto s = f.net->connect(9000, 0);
  transport::write_all(*s, wire::encode_negotiation(req), transport::Clock::now() + 2000ms);
  auto reply = wire::decode_reply(read_reply(*s));
  CHECK(reply.status == wire::ReplyStatus::Accepted);
  CHECK(reply.file_size == 10000);
  REQUIRE(wait_for([&] { return f.srv->metrics().filling_sessions == 1; }));
  CHECK(sees_eof(*s, 3000ms));
  CHECK(wait_for([&] { return f.srv->registry().size() == 0; }));
}

TEST_CASE("a client that never sends its negotiation is dropped") {
  Fixture f({}, storage::DiskEngineMode::Sync, [](server::ServerConfig& c) { c.handshake_timeout = 150ms; });
  auto s = f.net->connect(9000, 0);
  CHECK(sees_eof(*s, 3000ms));
}

TEST_CASE("shutdown with grace 0 mid-transfer errors the session and the client sees the close") {
  sim::SimNetConfig net;
  net.bandwidth_cap = 1e6;
  Fixture f(net);
  write_file(f.root.path() / "big.bin", random_bytes(4 << 20, 4));
  auto fut = std::async(std::launch::async,
                        [&] { return client::transfer(f.spec(f.remote("big.bin"), f.localf("big.bin"), 2)); });
  REQUIRE(wait_for([&] { return f.srv->metrics().active_sessions == 1; }));
  std::this_thread::sleep_for(100ms);
  auto m = f.srv->shutdown(0ms);
  CHECK(m.failed_sessions == 1);
  CHECK(m.completed_sessions == 0);
  CHECK(f.srv->live_threads() == 0);
  auto rep = fut.get();
  CHECK_FALSE(rep.success);
}

TEST_CASE("shutdown with a long grace lets the transfer finish") {
  sim::SimNetConfig net;
  net.bandwidth_cap = 8e6;
  Fixture f(net);
  auto data = random_bytes(1 << 20, 5);
  write_file(f.root.path() / "mid.bin", data);
  auto fut = std::async(std::launch::async,
                        [&] { return client::transfer(f.spec(f.remote("mid.bin"), f.localf("mid.bin"), 2)); });
  REQUIRE(wait_for([&] { return f.srv->metrics().active_sessions == 1; }));
  auto m = f.srv->shutdown(20000ms);
  CHECK(m.completed_sessions == 1);
  CHECK(m.failed_sessions == 0);
  auto rep = fut.get();
  CHECK(rep.success);
  CHECK(read_file(f.localf("mid.bin")) == data);
}

TEST_CASE("a fault in one session leaves a concurrent session intact") {
  sim::SimNetConfig net;
  net.bandwidth_cap = 4e6;
  // connections 0,1 belong to the healthy session, 2,3 to the faulty one
  net.fault_plan.push_back({2, 30000, sim::FaultKind::Close, sim::Flow::ServerToClient});
  Fixture f(net);
  auto good = random_bytes(1 << 20, 6);
  write_file(f.root.path() / "good.bin", good);
  write_file(f.root.path() / "bad.bin", random_bytes(1 << 20, 7));
  auto a = std::async(std::launch::async,
                      [&] { return client::transfer(f.spec(f.remote("good.bin"), f.localf("good.bin"), 2)); });
  REQUIRE(wait_for([&] { return f.srv->metrics().active_sessions == 1; }));
  auto b = client::transfer(f.spec(f.remote("bad.bin"), f.localf("bad.bin"), 2));
  CHECK_FALSE(b.success);
  auto ra = a.get();
  CHECK(ra.success);
  CHECK(read_file(f.localf("good.bin")) == good);
  REQUIRE(wait_for([&] { return f.srv->metrics().sessions.size() == 2; }));
  auto m = f.srv->metrics();
  CHECK(m.completed_sessions == 1);
  CHECK(m.failed_sessions == 1);
}

TEST_CASE("loopback TCP transfer with per-session metrics") {
  testsupport::TempDir root, local;
  server::ServerConfig cfg;
  cfg.root_dir = root.path().string();
  cfg.bind = {"127.0.0.1", 0};
  cfg.log_level = "off";
  auto srv = server::Server::serve(cfg);
  auto data = random_bytes(3 << 20, 8);
  write_file(root.path() / "t.bin", data);
  client::TransferSpec s;
  s.source_url = "xdfs://127.0.0.1:" + std::to_string(srv->endpoint().port) + "/t.bin";
  s.dest_url = (local.path() / "t.bin").string();
  s.parallel = 4;
  s.block_size = 64 * 1024;
  auto rep = client::transfer(s);
  REQUIRE(rep.success);
  CHECK(read_file(local.path() / "t.bin") == data);
  REQUIRE(wait_for([&] { return srv->metrics().completed_sessions == 1; }));
  auto m = srv->metrics();
  REQUIRE(m.sessions.size() == 1);
  CHECK(m.sessions[0].channels == 4);
  CHECK(m.sessions[0].success);
  CHECK(m.sessions[0].counters.payload_bytes == data.size());
  CHECK(m.total_bytes_out >= data.size());
}

TEST_CASE("log lines name their level as info, warn or error") {
  testsupport::TempDir logs;
  auto path = (logs.path() / "xferd.log").string();
  {
    Fixture f({}, storage::DiskEngineMode::Sync, [&](server::ServerConfig& c) {
      c.log_path = path;
      c.log_level = "info";
    });
    auto req = testsupport::make_requests(wire::Direction::Download, 1, 4096)[0];
    auto frame = wire::encode_negotiation(req);
    frame[6] = static_cast<std::uint8_t>(wire::ChannelEvent::XPATHM);
    auto s = f.net->connect(9000, 0);
    REQUIRE(s);
    transport::write_all(*s, frame, transport::Clock::now() + 2000ms);
    read_reply(*s);
    f.srv->shutdown(1000ms);
  }
  std::ifstream in(path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(text.find(" info listening on") != std::string::npos);
  CHECK(text.find(" warn session") != std::string::npos);
  CHECK(text.find("warning") == std::string::npos);
}
