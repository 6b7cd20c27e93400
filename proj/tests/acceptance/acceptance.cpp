// Acceptance gate: one PASS/FAIL line per criterion. Exit status is the number
// of failed criteria.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <future>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "fsm_model.hpp"
#include "gen.hpp"
#include "golden.hpp"
#include "support.hpp"
#include "xdfs/client.hpp"
#include "xdfs/server.hpp"

using namespace xdfs;
using namespace std::chrono_literals;
using testsupport::Bytes;
using testsupport::fnv1a;
using testsupport::random_bytes;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(const std::string& name, bool ok, const std::string& detail) {
  std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

// Runs a criterion, turning an escaped exception into a FAIL line.
void criterion(const std::string& name, const std::function<std::pair<bool, std::string>()>& body) {
  auto t0 = Clock::now();
  std::pair<bool, std::string> r;
  try {
    r = body();
  } catch (const std::exception& e) {
    r = {false, std::string("exception: ") + e.what()};
  }
  double s = std::chrono::duration<double>(Clock::now() - t0).count();
  char buf[32];
  std::snprintf(buf, sizeof buf, " (%.1f s)", s);
  report(name, r.first, r.second + buf);
}

bool wait_for(const std::function<bool()>& pred, std::chrono::milliseconds limit = 10000ms) {
  auto end = Clock::now() + limit;
  while (Clock::now() < end) {
    if (pred()) return true;
    std::this_thread::sleep_for(2ms);
  }
  return pred();
}

std::string fmt_bps(double bps) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f Gb/s", bps / 1e9);
  return buf;
}

struct ServerHarness {
  testsupport::TempDir root, local;
  std::shared_ptr<sim::SimNetwork> net;
  std::unique_ptr<server::Server> srv;
  std::string prefix;

  ServerHarness(bool tcp, sim::SimNetConfig ncfg = {}, storage::DiskEngineMode mode = storage::DiskEngineMode::Sync,
                std::chrono::milliseconds idle = 60000ms) {
    server::ServerConfig cfg;
    cfg.root_dir = root.path().string();
    cfg.disk_mode = mode;
    cfg.idle_timeout = idle;
    cfg.log_level = "off";
    if (tcp) {
      cfg.bind = {"127.0.0.1", 0};
    } else {
      net = sim::SimNetwork::create(std::move(ncfg));
      cfg.sim_network = net;
      cfg.sim_port = 9300;
    }
    srv = server::Server::serve(cfg);
    prefix = tcp ? "xdfs://127.0.0.1:" + std::to_string(srv->endpoint().port) + "/" : "xdfs://sim:9300/";
  }

  client::TransferSpec spec(const std::string& src, const std::string& dst, std::uint32_t n, std::uint64_t block) {
    client::TransferSpec s;
    s.source_url = src;
    s.dest_url = dst;
    s.parallel = n;
    s.block_size = block;
    s.sim_network = net;
    s.force = true;
    s.idle_timeout = 20000ms;
    return s;
  }
  std::string localf(const std::string& name) const { return (local.path() / name).string(); }
};

// Runs by merging sorted intervals.
std::size_t runs_oracle(std::vector<wire::BlockDescriptor> ds) {
  std::sort(ds.begin(), ds.end());
  std::size_t runs = 0;
  std::uint64_t end = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (i == 0 || ds[i].offset != end) ++runs;
    end = ds[i].offset + ds[i].length;
  }
  return runs;
}

// --------------------------------------------------------------- criteria

std::pair<bool, std::string> integrity_matrix() {
  const std::uint64_t block = 64 * 1024;
  const std::vector<std::uint64_t> sizes{0, 1, block - 1, block, block + 1, 10 * block + 3};
  const std::vector<std::uint32_t> ns{1, 2, 4, 8};
  auto t0 = Clock::now();
  std::size_t cells = 0, good = 0;
  std::string first_bad;
  for (bool tcp : {false, true}) {
    sim::SimNetConfig ncfg;
    ncfg.seed = 20240601;
    ncfg.fragmentation = sim::Fragmentation::RandomSplit;
    ServerHarness h(tcp, ncfg);
    for (auto size : sizes) {
      auto data = random_bytes(size, size * 31 + 7);
      auto want = fnv1a(data);
      testsupport::write_file(h.localf("src.bin"), data);
      for (auto n : ns) {
        std::string tag = std::string(tcp ? "tcp" : "sim") + " size=" + std::to_string(size) + " n=" + std::to_string(n);
        std::string remote = "m_" + std::to_string(size) + "_" + std::to_string(n) + ".bin";
        auto up = client::transfer(h.spec(h.localf("src.bin"), h.prefix + remote, n, block));
        bool ok_up = up.success && fnv1a(testsupport::read_file(h.root.path() / remote)) == want;
        auto down = client::transfer(h.spec(h.prefix + remote, h.localf("dst.bin"), n, block));
        bool ok_down = down.success && fnv1a(testsupport::read_file(h.localf("dst.bin"))) == want;
        cells += 2;
        good += ok_up + ok_down;
        if ((!ok_up || !ok_down) && first_bad.empty())
          first_bad = tag + (ok_up ? "" : " upload: " + up.error) + (ok_down ? "" : " download: " + down.error);
      }
    }
  }
  double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  std::string detail = std::to_string(good) + "/" + std::to_string(cells) + " cells hash-equal, " +
                       std::to_string(static_cast<int>(secs)) + " s (limit 120 s)";
  if (!first_bad.empty()) detail += "; first failure: " + first_bad;
  return {good == cells && secs < 120, detail};
}

std::pair<bool, std::string> codec_robustness() {
  using namespace wire;
  std::mt19937_64 rng(0xC0DEC);
  const int N = 100000;
  std::size_t bad = 0;
  for (int i = 0; i < N; ++i) {
    auto r = testgen::random_request(rng);
    auto b = encode_negotiation(r);
    bad += !(decode_negotiation(b) == r) || encode_negotiation(decode_negotiation(b)) != b;
  }
  for (int i = 0; i < N; ++i) {
    auto h = testgen::random_header(rng);
    auto b = encode_channel_header(h);
    bad += !(decode_channel_header(b) == h) || b.size() != kChannelHeaderSize;
  }
  for (int i = 0; i < N; ++i) {
    auto e = testgen::random_exception(rng);
    auto b = encode_exception(e);
    bad += !(decode_exception(b) == e) || encode_exception(decode_exception(b)) != b;
  }
  for (int i = 0; i < N; ++i) {
    auto r = testgen::random_reply(rng);
    auto b = encode_reply(r);
    bad += !(decode_reply(b) == r) || encode_reply(decode_reply(b)) != b;
  }
  // fuzz: every decoder must return a value or a typed Error
  std::size_t values = 0, typed = 0, untyped = 0;
  for (int i = 0; i < N; ++i) {
    std::size_t len = rng() % 4 == 0 ? rng() % 16 : rng() % 200;
    Bytes junk(len);
    for (auto& c : junk) c = static_cast<std::uint8_t>(rng());
    // half the inputs start with a plausible prefix so decoding goes deeper
    if (len >= 4 && rng() % 2) std::copy(kNegotiationMagic.begin(), kNegotiationMagic.end(), junk.begin());
    for (int which = 0; which < 4; ++which) {
      try {
        switch (which) {
          case 0: decode_negotiation(junk); break;
          case 1: decode_channel_header(junk); break;
          case 2: decode_exception(junk); break;
          default: decode_reply(junk); break;
        }
        ++values;
      } catch (const Error&) {
        ++typed;
      } catch (...) {
        ++untyped;
      }
    }
  }
  return {bad == 0 && untyped == 0,
          "4x" + std::to_string(N) + " round-trips, " + std::to_string(bad) + " mismatches; fuzz " +
              std::to_string(N) + " inputs x 4 decoders: " + std::to_string(values) + " values, " +
              std::to_string(typed) + " typed errors, " + std::to_string(untyped) + " untyped"};
}

std::pair<bool, std::string> cfsm_conformance() {
  std::size_t golden_ok = 0, golden_n = 0;
  std::string detail;
  bool replay_ok = true;
  for (const auto& c : golden::cases()) {
    ++golden_n;
    auto out = golden::check(c);
    golden_ok += out.ok;
    if (!out.ok) detail += out.detail;
    auto r = golden::run(c);
    for (const auto* t : {&r.server.trace, &r.client.trace})
      replay_ok = replay_ok && fsm::replay(t->kind, t->initial, t->events()) == *t;
  }
  std::mt19937_64 rng(77);
  for (int t = 0; t < 100; ++t) {
    fsmmodel::Model m(t % 2 == 0, 1 + t % 5, rng() % 50000, 4096, rng());
    m.run();
    for (const fsm::Machine* mc : {&m.sender(), &m.receiver()})
      replay_ok = replay_ok && fsm::replay(mc->kind(), mc->trace().initial, mc->trace().events()) == mc->trace();
  }
  auto d1 = fsm::check_duality(fsm::MachineKind::ServerDownload, fsm::MachineKind::ClientUpload);
  auto d2 = fsm::check_duality(fsm::MachineKind::ServerUpload, fsm::MachineKind::ClientDownload);
  std::size_t mismatches = d1.mismatches.size() + d2.mismatches.size();
  bool ok = golden_ok == golden_n && replay_ok && mismatches == 0;
  return {ok, std::to_string(golden_ok) + "/" + std::to_string(golden_n) + " golden pairs match, replay " +
                  (replay_ok ? "deterministic" : "DIVERGED") + ", duality " + std::to_string(d1.matched + d2.matched) +
                  " rows matched, " + std::to_string(mismatches) + " mismatches" +
                  (detail.empty() ? "" : "; " + detail)};
}

std::pair<bool, std::string> exactly_once() {
  std::mt19937_64 rng(200);
  std::size_t ok = 0;
  std::string first_bad;
  for (int t = 0; t < 200; ++t) {
    std::uint64_t block = 4096ull << (rng() % 5);
    std::uint64_t size = rng() % 8 == 0 ? rng() % block : rng() % (40 * block);
    std::uint32_t n = 1 + static_cast<std::uint32_t>(rng() % 8);
    sim::SimNetConfig net;
    net.seed = rng();
    net.fragmentation = sim::Fragmentation::RandomSplit;
    auto dir = t % 2 ? wire::Direction::Upload : wire::Direction::Download;
    auto data = random_bytes(size, rng());
    auto r = testsupport::lockstep_transfer(dir, n, data, block, net);
    const auto& sender = dir == wire::Direction::Download ? r.server : r.client;
    const auto& receiver = dir == wire::Direction::Download ? r.client : r.server;
    bool good = r.server.success && r.client.success && fsmmodel::tiles(sender.issued, size) &&
                fsmmodel::tiles(receiver.written, size) && r.destination == data;
    ok += good;
    if (!good && first_bad.empty())
      first_bad = "size=" + std::to_string(size) + " block=" + std::to_string(block) + " n=" + std::to_string(n);
  }
  return {ok == 200, std::to_string(ok) + "/200 random (size, block, n) triples partition [0, size) on both sides" +
                         (first_bad.empty() ? "" : "; first failure: " + first_bad)};
}

std::pair<bool, std::string> thread_census() {
  std::string detail;
  bool all = true;
  for (auto mode : {storage::DiskEngineMode::Sync, storage::DiskEngineMode::Async}) {
    for (std::size_t m = 1; m <= 3; ++m) {
      sim::SimNetConfig ncfg;
      ncfg.bandwidth_cap = 4e6;
      ServerHarness h(false, ncfg, mode);
      std::vector<std::future<client::TransferReport>> runs;
      for (std::size_t k = 0; k < m; ++k) {
        // mix directions; both keep their disk thread for the whole session
        std::string src = k % 2 ? h.prefix + "zero:2097152" : "zero:2097152";
        std::string dst = k % 2 ? "null:" : h.prefix + "null:";
        runs.push_back(std::async(std::launch::async, [&h, src, dst] {
          return client::transfer(h.spec(src, dst, 2, 64 * 1024));
        }));
      }
      bool reached = wait_for([&] { return h.srv->metrics().active_sessions == m; });
      auto met = h.srv->metrics();
      std::size_t disk = mode == storage::DiskEngineMode::Async ? m : 0;
      std::size_t want = 3 + m + disk;
      bool ok = reached && met.live_threads == want && met.session_thread_count == m &&
                met.disk_thread_count == disk && met.active_sessions == m;
      bool all_done = true;
      for (auto& f : runs) all_done = f.get().success && all_done;
      h.srv->shutdown(5000ms);
      ok = ok && all_done && h.srv->live_threads() == 0;
      all = all && ok;
      detail += std::string(storage::to_string(mode)) + " m=" + std::to_string(m) + ": " +
                std::to_string(met.live_threads) + "/" + std::to_string(want) + (ok ? "" : " MISMATCH") + "; ";
    }
  }
  return {all, detail + "live threads measured vs 3 + m (+m disk)"};
}

std::pair<bool, std::string> fault_isolation() {
  auto streams_before = transport::ChannelStream::open_count();
  sim::SimNetConfig ncfg;
  ncfg.bandwidth_cap = 4e6;
  // the healthy session takes connections 0 and 1, the faulty one 2 and 3
  ncfg.fault_plan.push_back({3, 40000, sim::FaultKind::Close, sim::Flow::ServerToClient});
  const auto idle = 3000ms;
  std::string detail;
  bool ok = true;
  {
    ServerHarness h(false, ncfg, storage::DiskEngineMode::Sync, idle);
    auto good = random_bytes(1 << 20, 1);
    testsupport::write_file(h.root.path() / "good.bin", good);
    testsupport::write_file(h.root.path() / "bad.bin", random_bytes(1 << 20, 2));
    auto spec_a = h.spec(h.prefix + "good.bin", h.localf("good.bin"), 2, 64 * 1024);
    auto a = std::async(std::launch::async, [&] { return client::transfer(spec_a); });
    if (!wait_for([&] { return h.srv->metrics().active_sessions == 1; })) return {false, "first session never started"};
    auto spec_b = h.spec(h.prefix + "bad.bin", h.localf("bad.bin"), 2, 64 * 1024);
    spec_b.idle_timeout = idle;
    auto t0 = Clock::now();
    auto b = client::transfer(spec_b);
    bool failed_in_time = false;
    std::chrono::milliseconds server_err{0};
    if (wait_for([&] { return h.srv->metrics().failed_sessions == 1; }, idle + 2000ms)) {
      server_err = std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - t0);
      failed_in_time = server_err <= idle + 500ms;
    }
    auto ra = a.get();
    bool good_hash = ra.success && testsupport::read_file(h.localf("good.bin")) == good;
    std::string bad_state;
    for (const auto& s : h.srv->metrics().sessions)
      if (s.remote_file_name == "bad.bin") bad_state = s.final_state;
    ok = good_hash && !b.success && failed_in_time && bad_state == "Error";
    detail = std::string("healthy session ") + (good_hash ? "hash-equal" : "CORRUPT") + ", faulted session " +
             (b.success ? "unexpectedly succeeded" : "failed") + " (server state " + bad_state + " after " +
             std::to_string(server_err.count()) + " ms, idle_timeout " + std::to_string(idle.count()) + " ms)";
    h.srv->shutdown(2000ms);
    ok = ok && h.srv->live_threads() == 0;
    detail += ", server threads after shutdown " + std::to_string(h.srv->live_threads());
  }
  bool no_leak = wait_for([&] { return transport::ChannelStream::open_count() == streams_before; }, 3000ms);
  detail += ", open streams back to baseline: " + std::string(no_leak ? "yes" : "no");
  return {ok && no_leak, detail};
}

std::pair<bool, std::string> async_equivalence() {
  std::mt19937_64 rng(50);
  std::size_t same = 0, batches = 0, batch_bad = 0;
  for (int t = 0; t < 50; ++t) {
    std::uint64_t block = 4096ull << (rng() % 4);
    std::uint64_t size = rng() % (30 * block);
    std::uint32_t n = 1 + static_cast<std::uint32_t>(rng() % 8);
    auto dir = t % 2 ? wire::Direction::Upload : wire::Direction::Download;
    sim::SimNetConfig net;
    net.seed = rng();
    net.fragmentation = sim::Fragmentation::RandomSplit;
    auto data = random_bytes(size, rng());
    auto rs = testsupport::lockstep_transfer(dir, n, data, block, net, storage::DiskEngineMode::Sync);
    auto ra = testsupport::lockstep_transfer(dir, n, data, block, net, storage::DiskEngineMode::Async);
    bool ok = rs.server.success && rs.client.success && ra.server.success && ra.client.success &&
              fnv1a(rs.destination) == fnv1a(ra.destination) && fnv1a(ra.destination) == fnv1a(data);
    same += ok;
    for (const auto* r : {&rs, &ra}) {
      const auto& receiver = dir == wire::Direction::Download ? r->client : r->server;
      for (const auto& b : receiver.batches) {
        ++batches;
        batch_bad += b.repositionings != runs_oracle(b.descriptors) || b.runs != b.repositionings;
      }
    }
  }
  return {same == 50 && batch_bad == 0 && batches > 0,
          std::to_string(same) + "/50 transfers hash-identical across sync/async; " + std::to_string(batches) +
              " drained batches, " + std::to_string(batch_bad) + " repositioning counts off the run oracle"};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v.empty() ? 0 : v[v.size() / 2];
}

std::pair<bool, std::string> throughput_loopback() {
  const std::uint64_t bytes = 64ull << 20;
  ServerHarness h(true);
  auto spec = h.spec(h.prefix + "zero:" + std::to_string(bytes), "null:", 4, 1 << 20);
  // warm up both paths once
  client::transfer(spec);
  client::raw_socket_baseline(bytes);
  std::vector<double> xdfs4, raw;
  for (int i = 0; i < 7; ++i) {
    raw.push_back(client::raw_socket_baseline(bytes));
    auto r = client::transfer(spec);
    if (!r.success) return {false, "transfer failed: " + r.error};
    xdfs4.push_back(r.throughput);
  }
  double x = median(xdfs4), b = median(raw);
  double ratio = x / b;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f%%", ratio * 100);
  return {ratio >= 0.8, "zero->null n=4 " + fmt_bps(x) + " vs raw single socket " + fmt_bps(b) + " = " + buf +
                            " (need >= 80%, medians of 7 interleaved 64 MiB runs)"};
}

std::pair<bool, std::string> throughput_capped_sim() {
  sim::SimNetConfig ncfg;
  ncfg.bandwidth_cap = 16e6;  // bytes/s per channel and direction
  ServerHarness h(false, ncfg);
  const std::uint64_t bytes = 16ull << 20;
  auto one = client::transfer(h.spec(h.prefix + "zero:" + std::to_string(bytes), "null:", 1, 1 << 20));
  auto four = client::transfer(h.spec(h.prefix + "zero:" + std::to_string(bytes), "null:", 4, 1 << 20));
  if (!one.success || !four.success) return {false, "transfer failed: " + one.error + four.error};
  double ratio = four.throughput / one.throughput;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", ratio);
  return {four.throughput >= 0.9 * one.throughput, "capped simulator, 16 MiB: n=1 " + fmt_bps(one.throughput) +
                                                       ", n=4 " + fmt_bps(four.throughput) + ", ratio " + buf +
                                                       " (need >= 0.9)"};
}

std::pair<bool, std::string> negotiation_law() {
  ServerHarness h(false);
  testsupport::write_file(h.root.path() / "law.bin", random_bytes(1 << 20, 3));
  auto reqs = testsupport::make_requests(wire::Direction::Download, 4, 64 * 1024);
  for (auto& r : reqs) r.remote_file_name = "law.bin";
  const auto& id = reqs[0].session_id;
  std::vector<transport::StreamPtr> streams;
  std::string probes;
  bool ok = true;
  for (std::uint32_t i = 0; i < 4; ++i) {
    auto s = h.net->connect(9300, 0);
    transport::write_all(*s, wire::encode_negotiation(reqs[i]), transport::Clock::now() + 2000ms);
    streams.push_back(std::move(s));
    bool joined = wait_for([&] { return h.srv->registry().joined_count(id) == i + 1 ||
                                        h.srv->registry().state_of(id) == session::SessionState::Active; });
    auto st = h.srv->registry().state_of(id);
    std::string name = st ? session::to_string(*st) : "absent";
    probes += "after join " + std::to_string(i + 1) + ": " + name + "; ";
    bool want_active = i == 3;
    ok = ok && joined && st && (*st == session::SessionState::Active) == want_active;
  }
  for (auto& s : streams) s->close();
  h.srv->shutdown(1000ms);
  return {ok, probes + "activation only on the 4th join"};
}

}  // namespace

int main() {
  std::printf("acceptance gate\n");
  criterion("integrity-matrix", integrity_matrix);
  criterion("codec-robustness", codec_robustness);
  criterion("cfsm-conformance", cfsm_conformance);
  criterion("exactly-once-coverage", exactly_once);
  criterion("thread-census", thread_census);
  criterion("fault-isolation", fault_isolation);
  criterion("async-equivalence", async_equivalence);
  criterion("throughput-loopback", throughput_loopback);
  criterion("throughput-capped-parallel", throughput_capped_sim);
  criterion("negotiation-law", negotiation_law);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
