#include <doctest.h>

#include <algorithm>
#include <random>

#include "../fsm_model.hpp"
#include "xdfs/fsm.hpp"

using namespace xdfs;
using namespace xdfs::fsm;
using wire::ChannelEvent;

namespace {

constexpr std::uint64_t MiB = 1 << 20;

template <class A>
std::vector<A> only(const std::vector<FsmAction>& actions) {
  std::vector<A> out;
  for (const auto& a : actions)
    if (auto p = std::get_if<A>(&a)) out.push_back(*p);
  return out;
}

bool has_close(const std::vector<FsmAction>& actions) { return !only<CloseSession>(actions).empty(); }

std::uint8_t u8(auto s) { return static_cast<std::uint8_t>(s); }

// Drives a machine through the front half for n channels plus DiskReady.
Machine ready(MachineKind k, std::uint32_t n, std::uint64_t size, std::uint64_t block = MiB) {
  Machine m(k, initial_context(k, size));
  auto dir = (k == MachineKind::ServerDownload || k == MachineKind::ClientDownload) ? wire::Direction::Download
                                                                                      : wire::Direction::Upload;
  auto reqs = fsmmodel::requests(dir, n, block);
  for (std::uint32_t i = 0; i < n; ++i) {
    REQUIRE_FALSE(m.step(ChannelConnected{i}).illegal);
    REQUIRE_FALSE(m.step(NegotiationReceived{reqs[i]}).illegal);
  }
  REQUIRE_FALSE(m.step(DiskReady{}).illegal);
  REQUIRE(std::string_view(m.state_name()) == "Dispatch");
  return m;
}

}  // namespace

TEST_CASE("server download front: single channel reaches ChannelsReady through lookup and register") {
  Machine m(MachineKind::ServerDownload, initial_context(MachineKind::ServerDownload, 10 * MiB));
  CHECK(m.state() == u8(ServerDownloadState::Authenticate));
  auto r = m.step(ChannelConnected{0});
  REQUIRE_FALSE(r.illegal);
  CHECK(m.state() == u8(ServerDownloadState::ReceiveParams));
  auto req = fsmmodel::requests(wire::Direction::Download, 1, MiB)[0];
  r = m.step(NegotiationReceived{req});
  REQUIRE_FALSE(r.illegal);
  CHECK(m.state() == u8(ServerDownloadState::ChannelsReady));
  std::vector<std::uint8_t> want{u8(ServerDownloadState::SessionLookup), u8(ServerDownloadState::RegisterChannel)};
  CHECK(r.path == want);
}

TEST_CASE("server download front: n=4 waits for every channel") {
  Machine m(MachineKind::ServerDownload, initial_context(MachineKind::ServerDownload, 10 * MiB));
  auto reqs = fsmmodel::requests(wire::Direction::Download, 4, MiB);
  for (std::uint32_t i = 0; i < 3; ++i) {
    REQUIRE_FALSE(m.step(ChannelConnected{i}).illegal);
    REQUIRE_FALSE(m.step(NegotiationReceived{reqs[i]}).illegal);
    CHECK(m.state() == u8(ServerDownloadState::RegisterChannel));
  }
  REQUIRE_FALSE(m.step(ChannelConnected{3}).illegal);
  REQUIRE_FALSE(m.step(NegotiationReceived{reqs[3]}).illegal);
  CHECK(m.state() == u8(ServerDownloadState::ChannelsReady));
  CHECK(m.context().joined == 4);
}

TEST_CASE("server download front: conflicting registrations fail, out-of-order events are illegal") {
  Machine m(MachineKind::ServerDownload, initial_context(MachineKind::ServerDownload, 10 * MiB));
  auto reqs = fsmmodel::requests(wire::Direction::Download, 2, MiB);
  m.step(ChannelConnected{0});
  m.step(NegotiationReceived{reqs[0]});
  m.step(ChannelConnected{1});
  auto r = m.step(NegotiationReceived{reqs[0]});
  REQUIRE_FALSE(r.illegal);
  CHECK(m.failed());
  CHECK(has_close(r.actions));

  Machine m2(MachineKind::ServerDownload, initial_context(MachineKind::ServerDownload, 10 * MiB));
  m2.step(ChannelConnected{0});
  m2.step(NegotiationReceived{reqs[0]});
  m2.step(ChannelConnected{1});
  auto wrong_n = reqs[1];
  wrong_n.channel_count = 3;
  m2.step(NegotiationReceived{wrong_n});
  CHECK(m2.failed());

  Machine m3(MachineKind::ServerDownload, initial_context(MachineKind::ServerDownload, 10 * MiB));
  m3.step(ChannelConnected{0});
  auto before = m3.context();
  r = m3.step(ChannelConnected{1});
  CHECK(r.illegal);
  CHECK(m3.context() == before);
  CHECK(m3.state() == u8(ServerDownloadState::ReceiveParams));
}

TEST_CASE("every Error exception in the data plane routes the sender to Error with CloseSession") {
  for (auto k : {MachineKind::ServerDownload, MachineKind::ClientUpload}) {
    auto m = ready(k, 2, 10 * MiB);
    // put channel 0 in flight so an exception is expected
    auto r = m.step(WriteReady{0});
    REQUIRE_FALSE(r.illegal);
    wire::ExceptionHeader e{wire::ExceptionStatus::Error, 5, "disk full"};
    r = m.step(ExceptionReceived{0, e});
    REQUIRE_FALSE(r.illegal);
    CHECK(m.failed());
    CHECK(has_close(r.actions));
  }
  // table level: every row leaving a data-plane state on ExceptionReceived into Error carries CloseSession
  for (auto k : {MachineKind::ServerDownload, MachineKind::ClientUpload}) {
    for (const auto& row : transition_table(k).rows) {
      if (row.event == EventKind::ExceptionReceived && is_error(k, row.to))
        CHECK((row.actions & (1u << static_cast<unsigned>(ActionKind::CloseSession))) != 0);
    }
  }
}

TEST_CASE("client download writes a block then acks on the same channel") {
  auto m = ready(MachineKind::ClientDownload, 3, 4 * MiB);
  auto r = m.step(HeaderReceived{2, {ChannelEvent::XFTSM, wire::BlockDescriptor{0, MiB}}});
  REQUIRE_FALSE(r.illegal);
  auto w = only<WriteBlockToDisk>(r.actions);
  REQUIRE(w.size() == 1);
  CHECK(w[0].block.offset == 0);
  CHECK(w[0].block.length == MiB);
  r = m.step(BlockIoDone{{0, MiB}});
  REQUIRE_FALSE(r.illegal);
  auto acks = only<SendException>(r.actions);
  REQUIRE(acks.size() == 1);
  CHECK(acks[0].index == 2);
  CHECK(acks[0].exception.is_ok());
}

TEST_CASE("client download terminates on EOFT with nothing pending") {
  auto m = ready(MachineKind::ClientDownload, 1, 0);
  auto r = m.step(HeaderReceived{0, {ChannelEvent::EOFT, std::nullopt}});
  REQUIRE_FALSE(r.illegal);
  CHECK(m.succeeded());
  CHECK(has_close(r.actions));
}

TEST_CASE("client download holds EOFT until pending writes are durable") {
  auto m = ready(MachineKind::ClientDownload, 1, MiB);
  m.step(HeaderReceived{0, {ChannelEvent::XFTSM, wire::BlockDescriptor{0, MiB}}});
  auto r = m.step(HeaderReceived{0, {ChannelEvent::EOFT, std::nullopt}});
  // either illegal (ack first) or not yet terminal; never Terminate with a write outstanding
  CHECK_FALSE(m.succeeded());
  (void)r;
}

TEST_CASE("server upload reassembles blocks arriving out of order") {
  auto m = ready(MachineKind::ServerUpload, 2, 2 * MiB);
  std::vector<wire::BlockDescriptor> writes;
  auto r = m.step(HeaderReceived{1, {ChannelEvent::XFTSMU, wire::BlockDescriptor{MiB, MiB}}});
  REQUIRE_FALSE(r.illegal);
  for (auto& w : only<WriteBlockToDisk>(r.actions)) writes.push_back(w.block);
  r = m.step(HeaderReceived{0, {ChannelEvent::XFTSMU, wire::BlockDescriptor{0, MiB}}});
  REQUIRE_FALSE(r.illegal);
  for (auto& w : only<WriteBlockToDisk>(r.actions)) writes.push_back(w.block);
  REQUIRE(writes.size() == 2);
  CHECK(writes[0].offset == MiB);
  CHECK(writes[1].offset == 0);
  CHECK(fsmmodel::tiles(writes, 2 * MiB));
}

TEST_CASE("server upload: every arrival order of the blocks is accepted and tiles the file") {
  std::vector<int> order{0, 1, 2, 3};
  int perms = 0;
  do {
    auto m = ready(MachineKind::ServerUpload, 4, 4 * MiB);
    std::vector<wire::BlockDescriptor> writes;
    for (int k : order) {
      auto r = m.step(HeaderReceived{static_cast<std::uint32_t>(k),
                                     {ChannelEvent::XFTSMU, wire::BlockDescriptor{k * MiB, MiB}}});
      REQUIRE_FALSE(r.illegal);
      for (auto& w : only<WriteBlockToDisk>(r.actions)) writes.push_back(w.block);
    }
    CHECK(fsmmodel::tiles(writes, 4 * MiB));
    ++perms;
  } while (std::next_permutation(order.begin(), order.end()));
  CHECK(perms == 24);
}

TEST_CASE("client upload waits in CollectAcks for an outstanding ack") {
  auto m = ready(MachineKind::ClientUpload, 2, MiB);
  auto r = m.step(WriteReady{0});
  REQUIRE_FALSE(r.illegal);
  CHECK(only<SendBlockPayload>(r.actions).size() == 1);
  CHECK(m.context().channels[0].lifecycle == AckLifecycle::NotDone);
  REQUIRE(m.context().scheduler.exhausted());
  r = m.step(EndOfFile{});
  REQUIRE_FALSE(r.illegal);
  CHECK(m.state() == u8(ClientUploadState::CollectAcks));
  CHECK(only<BroadcastEof>(r.actions).empty());
  r = m.step(ExceptionReceived{1, wire::ExceptionHeader::ok()});
  CHECK(r.illegal);
  CHECK(m.state() == u8(ClientUploadState::CollectAcks));
  r = m.step(ExceptionReceived{0, wire::ExceptionHeader::ok()});
  REQUIRE_FALSE(r.illegal);
  auto eofs = only<BroadcastEof>(r.actions);
  REQUIRE(eofs.size() == 1);
  CHECK(eofs[0].kind == ChannelEvent::EOFT);
  CHECK(m.context().acks_ok == 1);
  for (const auto& ch : m.context().channels) CHECK(ch.eof_sent);
}

TEST_CASE("client upload terminates once every channel acks EOF") {
  auto m = ready(MachineKind::ClientUpload, 3, 0);
  auto r = m.step(EndOfFile{});
  REQUIRE_FALSE(r.illegal);
  REQUIRE(only<BroadcastEof>(r.actions).size() == 1);
  for (std::uint32_t i = 0; i < 3; ++i) {
    CHECK_FALSE(m.terminal());
    r = m.step(ExceptionReceived{i, wire::ExceptionHeader::ok()});
    REQUIRE_FALSE(r.illegal);
  }
  CHECK(m.succeeded());
  CHECK(has_close(r.actions));
}

TEST_CASE("XPATHM in the data plane is answered with a mode error") {
  auto m = ready(MachineKind::ServerUpload, 1, MiB);
  auto r = m.step(HeaderReceived{0, {ChannelEvent::XPATHM, std::nullopt}});
  REQUIRE_FALSE(r.illegal);
  auto ex = only<SendException>(r.actions);
  REQUIRE(ex.size() == 1);
  CHECK_FALSE(ex[0].exception.is_ok());
  CHECK(ex[0].exception.code == static_cast<std::uint16_t>(wire::ExceptionCode::ModeNotImplemented));
}

TEST_CASE("EOFR idles a channel which can then resume") {
  auto m = ready(MachineKind::ServerUpload, 1, 2 * MiB);
  auto r = m.step(HeaderReceived{0, {ChannelEvent::EOFR, std::nullopt}});
  REQUIRE_FALSE(r.illegal);
  CHECK(m.context().channels[0].idle);
  CHECK_FALSE(m.terminal());
  r = m.step(HeaderReceived{0, {ChannelEvent::CONM, wire::BlockDescriptor{0, MiB}}});
  REQUIRE_FALSE(r.illegal);
  CHECK_FALSE(m.context().channels[0].idle);
  CHECK(only<WriteBlockToDisk>(r.actions).size() == 1);
}

TEST_CASE("local errors and peer close fail every machine before completion") {
  for (auto k : {MachineKind::ServerDownload, MachineKind::ClientDownload, MachineKind::ServerUpload,
                 MachineKind::ClientUpload}) {
    auto m = ready(k, 2, 4 * MiB);
    auto r = m.step(PeerClosed{1});
    REQUIRE_FALSE(r.illegal);
    CHECK(m.failed());
    CHECK(has_close(r.actions));
    auto m2 = ready(k, 2, 4 * MiB);
    r = m2.step(LocalError{"boom"});
    REQUIRE_FALSE(r.illegal);
    CHECK(m2.failed());
  }
}

// Properties

namespace {

std::vector<FsmEvent> random_events(std::mt19937_64& rng, std::uint32_t n, std::uint64_t size, std::size_t count) {
  std::vector<FsmEvent> out;
  auto reqs = fsmmodel::requests(rng() % 2 ? wire::Direction::Download : wire::Direction::Upload, n, 4096);
  for (std::size_t k = 0; k < count; ++k) {
    std::uint32_t i = static_cast<std::uint32_t>(rng() % (n + 1));
    switch (rng() % 12) {
      case 0: out.push_back(ChannelConnected{i}); break;
      case 1: out.push_back(NegotiationReceived{reqs[i % n]}); break;
      case 2: out.push_back(ReadReady{i}); break;
      case 3:
      case 4: out.push_back(WriteReady{i}); break;
      case 5: {
        auto ev = wire::kAllChannelEvents[rng() % wire::kAllChannelEvents.size()];
        ChannelHeader h{ev, std::nullopt};
        if (wire::carries_block(ev)) h.block = wire::BlockDescriptor{(rng() % 8) * 4096, 4096};
        out.push_back(HeaderReceived{i, h});
        break;
      }
      case 6:
      case 7: out.push_back(ExceptionReceived{i, wire::ExceptionHeader::ok()}); break;
      case 8: out.push_back(BlockIoDone{wire::BlockDescriptor{(rng() % 8) * 4096, 4096}}); break;
      case 9: out.push_back(DiskReady{}); break;
      case 10: out.push_back(EndOfFile{}); break;
      default:
        if (rng() % 8 == 0) out.push_back(PeerClosed{i});
        else out.push_back(ReadReady{i});
    }
    (void)size;
  }
  return out;
}

constexpr MachineKind kKinds[] = {MachineKind::ServerDownload, MachineKind::ClientDownload, MachineKind::ServerUpload,
                                 MachineKind::ClientUpload};

}  // namespace

TEST_CASE("step is pure: same inputs give identical outputs") {
  std::mt19937_64 rng(11);
  for (auto k : kKinds) {
    auto events = random_events(rng, 3, 8 * 4096, 400);
    Machine m(k, initial_context(k, 8 * 4096));
    for (const auto& ev : events) {
      auto s = m.state();
      auto ctx = m.context();
      auto a = step(k, s, ctx, ev);
      auto b = step(k, s, ctx, ev);
      CHECK(a.state == b.state);
      CHECK(a.ctx == b.ctx);
      CHECK(a.actions == b.actions);
      CHECK(a.illegal == b.illegal);
      CHECK(ctx == m.context());
      m.step(ev);
    }
  }
}

TEST_CASE("terminal states absorb every event") {
  std::mt19937_64 rng(12);
  for (auto k : kKinds) {
    for (std::uint8_t s = 0; s < state_count(k); ++s) {
      if (!is_absorbing(k, s)) continue;
      auto ctx = initial_context(k, 4096);
      for (const auto& ev : random_events(rng, 2, 4096, 300)) {
        auto r = step(k, s, ctx, ev);
        CHECK(r.state == s);
        CHECK(r.actions.empty());
      }
    }
  }
}

TEST_CASE("random walks: legal steps are table rows, illegal steps change nothing, lifecycles stay legal") {
  std::mt19937_64 rng(13);
  std::size_t legal = 0, illegal = 0;
  for (int walk = 0; walk < 300; ++walk) {
    auto k = kKinds[walk % 4];
    std::uint32_t n = 1 + static_cast<std::uint32_t>(rng() % 4);
    Machine m(k, initial_context(k, 8 * 4096));
    for (const auto& ev : random_events(rng, n, 8 * 4096, 200)) {
      auto s = m.state();
      auto ctx = m.context();
      auto r = m.step(ev);
      if (r.illegal) {
        ++illegal;
        CHECK(m.state() == s);
        CHECK(m.context() == ctx);
        continue;
      }
      ++legal;
      TableRow row{s, kind_of(ev), r.state, action_mask(r.actions)};
      if (!transition_table(k).contains(row)) {
        FAIL_CHECK(std::string(to_string(k)) << ": " << std::string(state_name(k, s)) << " " << std::string(to_string(kind_of(ev))) << " -> "
                                << std::string(state_name(k, r.state)) << " [" << mask_to_string(row.actions) << "]");
      }
      for (std::size_t i = 0; i < ctx.channels.size() && i < r.ctx.channels.size(); ++i) {
        auto a = ctx.channels[i].lifecycle, b = r.ctx.channels[i].lifecycle;
        CHECK((a == b || legal_lifecycle_step(a, b)));
      }
    }
  }
  CHECK(legal > 1000);
  CHECK(illegal > 1000);
}

TEST_CASE("lifecycle legality relation") {
  using L = AckLifecycle;
  CHECK(legal_lifecycle_step(L::FirstTime, L::NotDone));
  CHECK(legal_lifecycle_step(L::NotDone, L::Done));
  CHECK(legal_lifecycle_step(L::Done, L::NotDone));
  CHECK_FALSE(legal_lifecycle_step(L::FirstTime, L::Done));
  CHECK_FALSE(legal_lifecycle_step(L::Done, L::FirstTime));
  CHECK_FALSE(legal_lifecycle_step(L::NotDone, L::FirstTime));
}

TEST_CASE("replaying a recorded trace reproduces it exactly") {
  std::mt19937_64 rng(14);
  for (int t = 0; t < 40; ++t) {
    fsmmodel::Model model(t % 2 == 0, 1 + t % 4, (rng() % 40) * 4096 + rng() % 4096, 4096, rng());
    model.run();
    for (const Machine* m : {&model.sender(), &model.receiver()}) {
      const auto& tr = m->trace();
      auto again = replay(m->kind(), tr.initial, tr.events());
      CHECK(again == tr);
      CHECK(again.to_tsv() == tr.to_tsv());
    }
  }
}

TEST_CASE("paired machines complete with exactly-once coverage") {
  std::mt19937_64 rng(15);
  for (int t = 0; t < 200; ++t) {
    bool download = t % 2 == 0;
    std::uint32_t n = 1 + static_cast<std::uint32_t>(rng() % 6);
    std::uint64_t block = 4096ull << (rng() % 3);
    std::uint64_t size = rng() % 3 == 0 ? rng() % (3 * block) : (rng() % 30) * block + rng() % block;
    fsmmodel::Model model(download, n, size, block, rng());
    model.run();
    INFO("download=" << download << " n=" << n << " block=" << block << " size=" << size);
    for (const auto& f : model.checks().failures) FAIL_CHECK(f);
    REQUIRE(model.sender().succeeded());
    REQUIRE(model.receiver().succeeded());
    CHECK(fsmmodel::tiles(model.read(), size));
    CHECK(model.read() == model.sent());
    CHECK(fsmmodel::tiles(model.written(), size));
    CHECK(fsmmodel::tiles(model.durable(), size));
    const auto& sc = model.sender().context();
    CHECK(sc.blocks_read == model.read().size());
    CHECK(sc.blocks_sent == model.read().size());
    CHECK(sc.acks_ok == model.read().size());
    CHECK(sc.eof_acks == n);
  }
}

TEST_CASE("paired machines reject hostile interleavings without moving") {
  std::mt19937_64 rng(16);
  std::size_t illegal = 0;
  for (int t = 0; t < 60; ++t) {
    std::uint32_t n = 1 + static_cast<std::uint32_t>(rng() % 4);
    std::uint64_t size = (rng() % 20) * 4096 + rng() % 4096;
    fsmmodel::Model model(t % 2 == 0, n, size, 4096, rng(), 0.3);
    model.run();
    for (const auto& f : model.checks().failures) FAIL_CHECK(f);
    CHECK(model.sender().succeeded());
    CHECK(model.receiver().succeeded());
    CHECK(fsmmodel::tiles(model.durable(), size));
    illegal += model.illegal_count();
  }
  CHECK(illegal > 0);
}

TEST_CASE("model walks exercise every cooperative row of the data-plane tables") {
  std::mt19937_64 rng(17);
  std::set<std::pair<MachineKind, TableRow>> covered;
  for (int t = 0; t < 400; ++t) {
    std::uint32_t n = 1 + static_cast<std::uint32_t>(rng() % 4);
    std::uint64_t size = rng() % 4 == 0 ? 0 : (rng() % 12) * 4096 + rng() % 4096;
    fsmmodel::Model model(t % 2 == 0, n, size, 4096, rng());
    model.run();
    covered.insert(model.covered().begin(), model.covered().end());
  }
  for (auto k : kKinds) {
    for (const auto& row : transition_table(k).rows) {
      if (is_error(k, row.to)) continue;
      // HeaderReceived self-loops (NOOP, EOFR, foreign modes), ReadReady and late PeerClosed
      // are never produced by a cooperative peer.
      if (row.from == row.to && (row.event == EventKind::ReadReady || row.event == EventKind::PeerClosed ||
                                 row.event == EventKind::HeaderReceived))
        continue;
      if (!covered.count({k, row}))
        FAIL_CHECK("row not reached: " << std::string(to_string(k)) << " " << std::string(state_name(k, row.from))
                                       << " " << std::string(to_string(row.event)) << " -> "
                                       << std::string(state_name(k, row.to)) << " [" << mask_to_string(row.actions)
                                       << "]");
    }
  }
  CHECK(covered.size() > 20);
}

TEST_CASE("duality: shipped tables match under the data-plane map") {
  auto a = check_duality(MachineKind::ServerDownload, MachineKind::ClientUpload);
  for (const auto& m : a.mismatches) FAIL_CHECK(m);
  CHECK(a.matched > 0);
  auto b = check_duality(MachineKind::ServerUpload, MachineKind::ClientDownload);
  for (const auto& m : b.mismatches) FAIL_CHECK(m);
  CHECK(b.matched > 0);
}

TEST_CASE("duality: removing any single row yields exactly one mismatch") {
  for (auto [x, y] : {std::pair{MachineKind::ServerDownload, MachineKind::ClientUpload},
                      std::pair{MachineKind::ServerUpload, MachineKind::ClientDownload}}) {
    auto map = data_plane_map(x, y);
    const auto& full = transition_table(x);
    std::size_t in_plane = 0;
    for (std::size_t r = 0; r < full.rows.size(); ++r) {
      MachineTable cut = full;
      cut.rows.erase(cut.rows.begin() + static_cast<std::ptrdiff_t>(r));
      auto rep = check_duality(cut, transition_table(y), map);
      if (map.forward(full.rows[r].from) && map.forward(full.rows[r].to)) {
        ++in_plane;
        CHECK(rep.mismatches.size() == 1);
      } else {
        CHECK(rep.mismatches.empty());
      }
    }
    CHECK(in_plane > 0);
  }
}

TEST_CASE("duality: identity check of a machine against itself") {
  for (auto k : kKinds) {
    auto rep = check_duality(k, k);
    CHECK(rep.ok());
    CHECK(rep.matched == transition_table(k).rows.size());
  }
}

TEST_CASE("trace tsv has four tab separated columns per row") {
  fsmmodel::Model model(true, 2, 3 * 4096 + 5, 4096, 3);
  model.run();
  auto tsv = model.sender().trace().to_tsv();
  std::size_t lines = 0;
  std::size_t start = 0;
  while (start < tsv.size()) {
    auto end = tsv.find('\n', start);
    auto line = tsv.substr(start, end - start);
    CHECK(std::count(line.begin(), line.end(), '\t') == 3);
    ++lines;
    start = end + 1;
  }
  CHECK(lines == model.sender().trace().rows.size());
}
