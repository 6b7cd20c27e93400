#include "xdfs/piod.hpp"

#include <algorithm>
#include <cassert>
#include <thread>

namespace xdfs::piod {

using transport::Clock;
using transport::IoResult;
using namespace std::chrono_literals;

namespace {

constexpr std::size_t kMaxEventsPerRead = 16;
constexpr std::size_t kMaxIov = 16;
constexpr std::size_t kMinRecycle = 4096;
constexpr std::size_t kMaxSpare = 16;

}  // namespace

bool DispatchLists::disjoint() const {
  for (auto i : write_list)
    if (read_list.count(i)) return false;
  return true;
}

Dispatcher::Dispatcher(SessionInputs in, SessionConfig cfg) : in_(std::move(in)), cfg_(cfg) {
  if (in_.streams.empty()) throw Error(Errc::InvariantViolation, "session without channels");
  if (in_.streams.size() != in_.requests.size())
    throw Error(Errc::InvariantViolation, "one negotiation request per channel is required");
  if (!in_.file) throw Error(Errc::InvariantViolation, "session without a file stream");
  if (sender() && !in_.file_size) throw Error(Errc::InvariantViolation, "sender needs the file size");
  ch_.resize(in_.streams.size());
  for (std::size_t i = 0; i < ch_.size(); ++i) ch_[i].stream = std::move(in_.streams[i]);
  in_.streams.clear();
  counters_.channels.resize(ch_.size());
  machine_ = std::make_unique<fsm::Machine>(cfg_.kind, fsm::initial_context(cfg_.kind, in_.file_size));
  machine_->set_recording(cfg_.record_trace);
  last_activity_ = Clock::now();
}

Dispatcher::~Dispatcher() {
  close_all();
}

void Dispatcher::start() {
  if (started_) return;
  started_ = true;
  for (std::uint32_t i = 0; i < ch_.size(); ++i) {
    std::size_t window = static_cast<std::size_t>(in_.requests[i].tcp_window_size);
    if (window) ch_[i].stream->apply_window(window);
  }
  for (std::uint32_t i = 0; i < ch_.size(); ++i) {
    feed(fsm::ChannelConnected{i});
    feed(fsm::NegotiationReceived{in_.requests[i]});
  }
  try {
    if (sender()) {
      source_ = storage::make_source(*in_.file, *in_.file_size, in_.requests[0].block_size, cfg_.engine);
    } else {
      sink_ = storage::make_sink(*in_.file, cfg_.engine);
    }
    feed(fsm::DiskReady{});
  } catch (const std::exception& e) {
    feed(fsm::LocalError{e.what()});
  }
  drain_events();
  publish();
}

void Dispatcher::feed(fsm::FsmEvent ev) {
  events_.push_back(std::move(ev));
  drain_events();
}

void Dispatcher::drain_events() {
  while (!events_.empty()) {
    fsm::FsmEvent ev = std::move(events_.front());
    events_.pop_front();
    if (machine_->terminal()) continue;
    auto r = machine_->step(ev);
    if (r.illegal) {
      if (error_.empty()) error_ = "illegal transition: " + *r.illegal;
      events_.push_front(fsm::LocalError{"illegal transition: " + *r.illegal});
      continue;
    }
    if (machine_->failed() && error_.empty()) {
      if (auto* le = std::get_if<fsm::LocalError>(&ev)) error_ = le->description;
      else error_ = fsm::to_string(ev);
    }
    execute(r.actions);
    maybe_end_of_file();
  }
}

void Dispatcher::maybe_end_of_file() {
  if (!sender() || machine_->terminal()) return;
  const auto& c = machine_->context();
  if (std::string_view(machine_->state_name()) == "Dispatch" && c.scheduler.exhausted() && !c.end_of_file)
    events_.push_back(fsm::EndOfFile{});
}

void Dispatcher::execute(const std::vector<fsm::FsmAction>& actions) {
  for (const auto& a : actions) {
    try {
      execute_one(a);
    } catch (const std::exception& e) {
      events_.push_back(fsm::LocalError{e.what()});
      return;
    }
  }
}

void Dispatcher::execute_one(const fsm::FsmAction& a) {
  using namespace fsm;
  if (auto* x = std::get_if<ReadBlockFromDisk>(&a)) {
    wire::Bytes data = source_->take(x->block);
    if (data.size() != x->block.length) throw Error(Errc::IoFailure, "source shorter than announced size");
    issued_.push_back(x->block);
    staged_.emplace(x->block, std::move(data));
  } else if (auto* x = std::get_if<SendHeader>(&a)) {
    enqueue(x->index, wire::encode_channel_header(x->header));
  } else if (auto* x = std::get_if<SendBlockPayload>(&a)) {
    if (!staged_ || staged_->first != x->block) throw Error(Errc::InvariantViolation, "payload was not read");
    counters_.channels[x->index].blocks_sent++;
    counters_.blocks++;
    counters_.payload_bytes += x->block.length;
    ch_[x->index].out.push_back(OutSeg{std::move(staged_->second), 0, true});
    staged_.reset();
    flush(x->index);
  } else if (auto* x = std::get_if<SendException>(&a)) {
    counters_.channels[x->index].acks_sent++;
    counters_.acks++;
    enqueue(x->index, wire::encode_exception(x->exception));
    flush(x->index);
  } else if (auto* x = std::get_if<WriteBlockToDisk>(&a)) {
    if (current_payload_.size() != x->block.length) throw Error(Errc::InvariantViolation, "payload size mismatch");
    written_.push_back(x->block);
    storage::WriteRequest w{x->block.offset, std::move(current_payload_)};
    current_payload_ = {};
    if (!blocked_writes_.empty() || !sink_->submit(w)) blocked_writes_.push_back(std::move(w));
    else recycle(std::move(w.data));
    collect_disk();
  } else if (auto* x = std::get_if<MoveToReadList>(&a)) {
    lists_.write_list.erase(x->index);
    lists_.read_list[x->index] = x->lifecycle;
  } else if (auto* x = std::get_if<MoveToWriteList>(&a)) {
    lists_.read_list.erase(x->index);
    lists_.write_list.insert(x->index);
  } else if (auto* x = std::get_if<BroadcastEof>(&a)) {
    for (std::uint32_t i = 0; i < ch_.size(); ++i) {
      enqueue(i, wire::encode_channel_header(wire::ChannelHeader{x->kind, std::nullopt}));
      flush(i);
    }
  } else if (auto* x = std::get_if<CloseChannel>(&a)) {
    ch_[x->index].stream->close();
    ch_[x->index].read_open = ch_[x->index].write_open = false;
  } else if (std::holds_alternative<CloseSession>(a)) {
    begin_closing();
  }
}

void Dispatcher::enqueue(std::uint32_t i, wire::Bytes data) {
  if (data.empty()) return;
  ch_[i].out.push_back(OutSeg{std::move(data), 0});
}

void Dispatcher::flush(std::uint32_t i) {
  auto& c = ch_[i];
  while (!c.out.empty() && c.write_open) {
    std::array<std::span<const std::uint8_t>, kMaxIov> iov;
    std::size_t n = 0;
    for (auto it = c.out.begin(); it != c.out.end() && n < kMaxIov; ++it, ++n)
      iov[n] = std::span<const std::uint8_t>(it->data).subspan(it->pos);
    IoResult r = c.stream->write_vectored(std::span(iov.data(), n));
    if (r.status == IoResult::Status::WouldBlock) return;
    if (r.status != IoResult::Status::Ok) {
      c.write_open = false;
      c.out.clear();
      peer_closed(i);
      return;
    }
    last_activity_ = Clock::now();
    counters_.channels[i].bytes_sent += r.bytes;
    std::size_t left = r.bytes;
    while (left && !c.out.empty()) {
      auto& seg = c.out.front();
      std::size_t take = std::min(left, seg.data.size() - seg.pos);
      seg.pos += take;
      left -= take;
      if (seg.pos == seg.data.size()) {
        if (seg.payload && source_) source_->recycle(std::move(seg.data));
        c.out.pop_front();
      }
    }
  }
}

void Dispatcher::peer_closed(std::uint32_t i) {
  auto& c = ch_[i];
  if (c.peer_closed_fed) return;
  c.peer_closed_fed = true;
  c.read_open = false;
  events_.push_back(fsm::PeerClosed{i});
}

// Reads frames on channel i until the stream would block or the per-round
// budget is spent. Never reads past the end of the frame being assembled.
void Dispatcher::read_channel(std::uint32_t i) {
  for (std::size_t k = 0; k < kMaxEventsPerRead && ch_[i].read_open && !closing_; ++k) {
    if (!read_frame_part(i)) break;
    drain_events();
  }
}

bool Dispatcher::read_frame_part(std::uint32_t i) {
  auto& c = ch_[i];
  auto pull = [&](std::span<std::uint8_t> dst) -> std::optional<std::size_t> {
    IoResult r = c.stream->read(dst);
    if (r.status == IoResult::Status::Ok) {
      last_activity_ = Clock::now();
      counters_.channels[i].bytes_received += r.bytes;
      return r.bytes;
    }
    if (r.status == IoResult::Status::WouldBlock) return std::nullopt;
    peer_closed(i);
    return std::nullopt;
  };

  try {
    if (!sender()) {
      // channel header, then payload for block-carrying events
      if (!c.header) {
        auto n = pull(std::span(c.fixed.data() + c.fixed_got, wire::kChannelHeaderSize - c.fixed_got));
        if (!n) return false;
        c.fixed_got += *n;
        if (c.fixed_got < wire::kChannelHeaderSize) return true;
        c.fixed_got = 0;
        c.header = wire::decode_channel_header(std::span<const std::uint8_t>(c.fixed.data(), wire::kChannelHeaderSize));
        std::uint64_t len = c.header->block ? c.header->block->length : 0;
        if (len > in_.requests[i].block_size)
          throw Error(Errc::MalformedHeader, "block larger than the negotiated block size");
        if (c.body.capacity() < len && !spare_.empty()) {
          c.body = std::move(spare_.back());
          spare_.pop_back();
        }
        c.body.resize(static_cast<std::size_t>(len));
        c.body_got = 0;
      }
      if (c.body_got < c.body.size()) {
        auto n = pull(std::span(c.body.data() + c.body_got, c.body.size() - c.body_got));
        if (!n) return false;
        c.body_got += *n;
        if (c.body_got < c.body.size()) return true;
      }
      wire::ChannelHeader h = *c.header;
      c.header.reset();
      if (h.block) {
        counters_.channels[i].blocks_received++;
        counters_.blocks++;
        counters_.payload_bytes += h.block->length;
      }
      current_payload_ = std::move(c.body);
      c.body = {};
      events_.push_back(fsm::HeaderReceived{i, h});
      drain_events();
      current_payload_ = {};
      return true;
    }
    // exception frames
    if (c.fixed_got < wire::kExceptionFixedSize) {
      auto n = pull(std::span(c.fixed.data() + c.fixed_got, wire::kExceptionFixedSize - c.fixed_got));
      if (!n) return false;
      c.fixed_got += *n;
      if (c.fixed_got < wire::kExceptionFixedSize) return true;
      auto probe = wire::peek_exception_size(std::span<const std::uint8_t>(c.fixed.data(), c.fixed_got));
      c.body.assign(c.fixed.begin(), c.fixed.begin() + wire::kExceptionFixedSize);
      c.body.resize(probe.size);
      c.body_got = wire::kExceptionFixedSize;
    }
    if (c.body_got < c.body.size()) {
      auto n = pull(std::span(c.body.data() + c.body_got, c.body.size() - c.body_got));
      if (!n) return false;
      c.body_got += *n;
      if (c.body_got < c.body.size()) return true;
    }
    wire::ExceptionHeader e = wire::decode_exception(c.body);
    c.fixed_got = 0;
    c.body.clear();
    c.body_got = 0;
    counters_.channels[i].acks_received++;
    events_.push_back(fsm::ExceptionReceived{i, std::move(e)});
    return true;
  } catch (const Error& e) {
    c.read_open = false;
    events_.push_back(fsm::LocalError{"channel " + std::to_string(i) + ": " + e.what()});
    return false;
  }
}

void Dispatcher::collect_disk() {
  if (!sink_) return;
  retry_blocked_writes();
  std::vector<wire::BlockDescriptor> done;
  try {
    done = sink_->take_completed();
  } catch (const std::exception& e) {
    events_.push_back(fsm::LocalError{e.what()});
    return;
  }
  if (!done.empty()) last_activity_ = Clock::now();
  for (const auto& d : done) events_.push_back(fsm::BlockIoDone{d});
}

void Dispatcher::retry_blocked_writes() {
  while (!blocked_writes_.empty()) {
    if (!sink_->submit(blocked_writes_.front())) return;
    recycle(std::move(blocked_writes_.front().data));
    blocked_writes_.pop_front();
  }
}

// A sync sink leaves the written buffer behind; an async one moves it away.
void Dispatcher::recycle(wire::Bytes b) {
  if (b.capacity() >= kMinRecycle && spare_.size() < kMaxSpare) spare_.push_back(std::move(b));
}

bool Dispatcher::disk_busy() const {
  if (sink_ && (sink_->pending() || !blocked_writes_.empty())) return true;
  if (source_ && !source_->ready() && !lists_.write_list.empty()) return true;
  return false;
}

void Dispatcher::begin_closing() {
  if (closing_) return;
  closing_ = true;
  auto grace = machine_->failed() ? std::min(cfg_.close_grace, std::chrono::milliseconds(1000)) : cfg_.close_grace;
  close_deadline_ = Clock::now() + grace;
}

void Dispatcher::close_all() {
  for (auto& c : ch_) {
    if (c.stream) c.stream->close();
    c.read_open = c.write_open = false;
  }
  lists_.read_list.clear();
  lists_.write_list.clear();
}

void Dispatcher::publish() {
  if (sink_) counters_.repositionings = sink_->stats().repositionings;
  std::lock_guard lk(pub_mu_);
  published_ = counters_;
}

TransferCounters Dispatcher::counters() const {
  std::lock_guard lk(pub_mu_);
  return published_;
}

bool Dispatcher::step_once(std::chrono::milliseconds timeout) {
  if (finished_) return false;
  if (!started_) start();
  ++counters_.loop_iterations;

  if (!closing_) {
    if (cfg_.abort && cfg_.abort->load(std::memory_order_acquire)) {
      feed(fsm::LocalError{"session aborted"});
    } else if (Clock::now() - last_activity_ > cfg_.idle_timeout) {
      feed(fsm::LocalError{"idle timeout"});
    }
  }

  if (closing_) {
    bool pending = false;
    for (std::uint32_t i = 0; i < ch_.size(); ++i) {
      flush(i);
      if (!ch_[i].out.empty() && ch_[i].write_open) pending = true;
    }
    if (!pending || Clock::now() >= close_deadline_) {
      close_all();
      finished_ = true;
      publish();
      return false;
    }
    std::vector<transport::ChannelStream*> ps;
    std::vector<transport::Interest> is;
    for (auto& c : ch_) {
      if (!c.out.empty() && c.write_open) {
        ps.push_back(c.stream.get());
        is.push_back({false, true});
      }
    }
    transport::poll_readiness(ps, is, std::min(timeout, std::chrono::milliseconds(10)));
    publish();
    return true;
  }

  std::vector<transport::ChannelStream*> ps;
  std::vector<transport::Interest> is;
  std::vector<std::uint32_t> idx;
  bool source_ready = !source_ || source_->ready();
  for (std::uint32_t i = 0; i < ch_.size(); ++i) {
    auto& c = ch_[i];
    transport::Interest want;
    want.read = c.read_open && lists_.read_list.count(i);
    want.write = c.write_open && (!c.out.empty() || (lists_.write_list.count(i) && source_ready));
    if (want.read || want.write) {
      ps.push_back(c.stream.get());
      is.push_back(want);
      idx.push_back(i);
    }
  }
  auto wait = timeout;
  if (disk_busy()) wait = std::min(wait, std::chrono::milliseconds(1));

  std::vector<transport::Readiness> ready;
  if (!ps.empty()) {
    try {
      ready = transport::poll_readiness(ps, is, wait);
    } catch (const std::exception& e) {
      feed(fsm::LocalError{e.what()});
    }
  } else if (wait.count() > 0) {
    std::this_thread::sleep_for(std::min(wait, std::chrono::milliseconds(1)));
  }
  if (!ready.empty()) last_activity_ = Clock::now();

  for (const auto& r : ready) {
    if (closing_ || machine_->terminal()) break;
    std::uint32_t i = idx[r.index];
    if (r.writable) {
      flush(i);
      drain_events();
      auto& c = ch_[i];
      if (!closing_ && c.write_open && c.out.empty() && lists_.write_list.count(i) && (!source_ || source_->ready()))
        feed(fsm::WriteReady{i});
    }
    if (r.readable && !closing_) read_channel(i);
  }

  collect_disk();
  drain_events();
  assert(lists_.disjoint());
  publish();
  return true;
}

SessionResult Dispatcher::result() {
  SessionResult res;
  try {
    if (source_) source_->finish();
    if (sink_) sink_->finish();
  } catch (const std::exception& e) {
    if (error_.empty()) error_ = e.what();
    res.success = false;
  }
  if (sink_) {
    res.engine = sink_->stats();
    res.batches = sink_->batch_records();
    counters_.repositionings = res.engine.repositionings;
  }
  res.success = machine_->succeeded() && error_.empty();
  if (!res.success && error_.empty()) error_ = std::string("session ended in ") + machine_->state_name();
  res.error = error_;
  res.final_state = machine_->state_name();
  res.trace = machine_->trace();
  res.counters = counters_;
  res.issued = issued_;
  res.written = written_;
  return res;
}

SessionResult run_session(SessionInputs in, SessionConfig cfg) {
  Dispatcher d(std::move(in), cfg);
  d.start();
  while (d.step_once(std::chrono::milliseconds(50))) {
  }
  return d.result();
}

}  // namespace xdfs::piod
