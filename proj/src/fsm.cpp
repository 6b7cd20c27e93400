#include "xdfs/fsm.hpp"

#include <algorithm>
#include <sstream>

namespace xdfs::fsm {

namespace {

template <typename... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <typename... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

template <typename S>
struct Traits;

template <>
struct Traits<ServerDownloadState> {
  static constexpr MachineKind kind = MachineKind::ServerDownload;
  static constexpr bool server = true;
  static constexpr bool sender = true;
  static constexpr ChannelEvent data_event = ChannelEvent::XFTSM;
  static constexpr wire::Direction direction = wire::Direction::Download;
  static constexpr ServerDownloadState ready = ServerDownloadState::ChannelsReady;
};
template <>
struct Traits<ClientUploadState> {
  static constexpr MachineKind kind = MachineKind::ClientUpload;
  static constexpr bool server = false;
  static constexpr bool sender = true;
  static constexpr ChannelEvent data_event = ChannelEvent::XFTSMU;
  static constexpr wire::Direction direction = wire::Direction::Upload;
  static constexpr ClientUploadState ready = ClientUploadState::AllChannelsUp;
};
template <>
struct Traits<ServerUploadState> {
  static constexpr MachineKind kind = MachineKind::ServerUpload;
  static constexpr bool server = true;
  static constexpr bool sender = false;
  static constexpr ChannelEvent data_event = ChannelEvent::XFTSMU;
  static constexpr wire::Direction direction = wire::Direction::Upload;
  static constexpr ServerUploadState ready = ServerUploadState::ChannelsReady;
};
template <>
struct Traits<ClientDownloadState> {
  static constexpr MachineKind kind = MachineKind::ClientDownload;
  static constexpr bool server = false;
  static constexpr bool sender = false;
  static constexpr ChannelEvent data_event = ChannelEvent::XFTSM;
  static constexpr wire::Direction direction = wire::Direction::Download;
  static constexpr ClientDownloadState ready = ClientDownloadState::AllChannelsUp;
};

template <typename S>
class Stepper {
 public:
  using T = Traits<S>;

  Stepper(S s, const Context& c) : from_(s), orig_(c), ctx_(c) { t_.state = s; }

  Transition<S> run(const FsmEvent& ev) {
    if (absorbing(from_)) return illegal("state is absorbing");
    if (auto* e = std::get_if<LocalError>(&ev)) return fail(e->description);
    if (in_front()) return front(ev);
    if (from_ == T::ready) {
      if (std::holds_alternative<DiskReady>(ev)) return start_data_plane();
      if (std::holds_alternative<PeerClosed>(ev)) return fail("peer closed");
      return illegal("only DiskReady leaves the ready state");
    }
    if constexpr (T::sender) {
      return sender(ev);
    } else {
      return receiver(ev);
    }
  }

  static bool absorbing(S s) { return s == S::Terminate || s == S::Error; }

 private:
  bool in_front() const {
    if constexpr (T::server) {
      return from_ == S::Authenticate || from_ == S::ReceiveParams || from_ == S::SessionLookup ||
             from_ == S::RegisterChannel;
    } else {
      return from_ == S::Connect || from_ == S::Authenticate || from_ == S::SendRequest;
    }
  }

  Transition<S> done(S to) {
    t_.state = to;
    t_.ctx = std::move(ctx_);
    return std::move(t_);
  }

  Transition<S> illegal(std::string why) {
    Transition<S> t;
    t.state = from_;
    t.ctx = orig_;
    t.illegal = std::string(state_name(T::kind, static_cast<std::uint8_t>(from_))) + ": " + why;
    return t;
  }

  Transition<S> fail(const std::string&) {
    t_.actions.push_back(CloseSession{});
    return done(S::Error);
  }

  void via(S s) { t_.path.push_back(s); }

  // Registration / connection front

  Transition<S> front(const FsmEvent& ev) {
    if (std::holds_alternative<PeerClosed>(ev)) return fail("peer closed during negotiation");
    if constexpr (T::server) {
      if (std::holds_alternative<ChannelConnected>(ev)) {
        if (from_ == S::Authenticate) return done(S::ReceiveParams);
        if (from_ == S::RegisterChannel) return done(S::SessionLookup);
        return illegal("channel connected while parameters are awaited");
      }
      if (auto* n = std::get_if<NegotiationReceived>(&ev)) {
        if (from_ != S::ReceiveParams && from_ != S::SessionLookup) return illegal("negotiation not awaited");
        if (from_ == S::ReceiveParams) via(S::SessionLookup);
        if (!accept_request(n->request, from_ == S::ReceiveParams)) return fail("bad negotiation");
        if (ctx_.joined == ctx_.expected) {
          via(S::RegisterChannel);
          return done(S::ChannelsReady);
        }
        return done(S::RegisterChannel);
      }
      return illegal("event not part of session registration");
    } else {
      if (std::holds_alternative<ChannelConnected>(ev)) {
        if (from_ != S::Connect) return illegal("channel connected while a reply is awaited");
        via(S::Authenticate);
        return done(S::SendRequest);
      }
      if (auto* n = std::get_if<NegotiationReceived>(&ev)) {
        if (from_ != S::SendRequest) return illegal("negotiation not awaited");
        if (!accept_request(n->request, ctx_.joined == 0)) return fail("bad negotiation");
        if (ctx_.joined == ctx_.expected) return done(S::AllChannelsUp);
        return done(S::Connect);
      }
      return illegal("event not part of channel setup");
    }
  }

  bool accept_request(const NegotiationRequest& r, bool first) {
    if (r.direction != T::direction) return false;
    if (r.channel_count == 0 || r.channel_index >= r.channel_count) return false;
    if (r.block_size == 0 || r.block_size > UINT32_MAX) return false;
    if (first && ctx_.joined == 0) {
      ctx_.params = r;
      ctx_.expected = r.channel_count;
      ctx_.channels.assign(r.channel_count, ChannelCtx{});
    } else {
      if (!ctx_.params) return false;
      const auto& p = *ctx_.params;
      if (r.session_id != p.session_id || r.channel_count != p.channel_count ||
          r.remote_file_name != p.remote_file_name || r.block_size != p.block_size)
        return false;
    }
    auto& ch = ctx_.channels[r.channel_index];
    if (ch.joined) return false;
    ch.joined = true;
    ++ctx_.joined;
    return true;
  }

  Transition<S> start_data_plane() {
    if constexpr (T::sender) {
      if (!ctx_.file_size) return illegal("sender needs the file size");
      ctx_.scheduler = piod::BlockScheduler(*ctx_.file_size, ctx_.params->block_size);
      for (std::uint32_t i = 0; i < ctx_.expected; ++i) {
        ctx_.channels[i].list = ListKind::Write;
        t_.actions.push_back(MoveToWriteList{i});
      }
    } else {
      for (std::uint32_t i = 0; i < ctx_.expected; ++i) {
        ctx_.channels[i].list = ListKind::Read;
        t_.actions.push_back(MoveToReadList{i, AckLifecycle::FirstTime});
      }
    }
    return done(S::Dispatch);
  }

  bool valid_index(std::uint32_t i) const { return i < ctx_.channels.size(); }

  // Sender data plane

  Transition<S> sender(const FsmEvent& ev) {
    if (std::holds_alternative<ReadReady>(ev)) {
      if (!valid_index(std::get<ReadReady>(ev).index)) return illegal("no such channel");
      return done(from_);
    }
    if (from_ == S::Dispatch) {
      if (auto* w = std::get_if<WriteReady>(&ev)) return send_next(w->index);
      if (auto* e = std::get_if<ExceptionReceived>(&ev)) return ack(*e, S::Dispatch);
      if (std::holds_alternative<EndOfFile>(ev)) return end_of_file();
      if (std::holds_alternative<PeerClosed>(ev)) return fail("peer closed mid-transfer");
      return illegal("not legal while dispatching");
    }
    if (from_ == S::CollectAcks) {
      if (auto* e = std::get_if<ExceptionReceived>(&ev)) return ack(*e, S::CollectAcks);
      if (std::holds_alternative<PeerClosed>(ev)) return fail("peer closed before all acks");
      return illegal("not legal while collecting acks");
    }
    if (from_ == S::SendEofHeaders) {
      if (auto* e = std::get_if<ExceptionReceived>(&ev)) return eof_ack(*e);
      if (auto* p = std::get_if<PeerClosed>(&ev)) {
        if (valid_index(p->index) && ctx_.channels[p->index].eof_done) return done(S::SendEofHeaders);
        return fail("peer closed before EOF ack");
      }
      return illegal("not legal while awaiting EOF acks");
    }
    return illegal("transient state");
  }

  Transition<S> send_next(std::uint32_t i) {
    if (!valid_index(i)) return illegal("no such channel");
    auto& ch = ctx_.channels[i];
    if (ch.list != ListKind::Write) return illegal("channel not in write list");
    if (ch.lifecycle == AckLifecycle::NotDone) return illegal("channel awaits an ack");
    auto b = ctx_.scheduler.next_block();
    if (!b) return illegal("no block left; EndOfFile expected");
    t_.actions.push_back(ReadBlockFromDisk{*b});
    ++ctx_.blocks_read;
    via(S::SendBlocks);
    t_.actions.push_back(SendHeader{i, ChannelHeader{T::data_event, *b}});
    t_.actions.push_back(SendBlockPayload{i, *b});
    ++ctx_.blocks_sent;
    ++ch.blocks;
    via(S::MarkAwaitAck);
    ch.lifecycle = AckLifecycle::NotDone;
    ch.list = ListKind::Read;
    ch.in_flight = *b;
    t_.actions.push_back(MoveToReadList{i, AckLifecycle::NotDone});
    return done(S::Dispatch);
  }

  Transition<S> ack(const ExceptionReceived& e, S stay) {
    if (!valid_index(e.index)) return illegal("no such channel");
    if (!e.exception.is_ok()) return fail("peer reported an error");
    auto& ch = ctx_.channels[e.index];
    if (ch.lifecycle != AckLifecycle::NotDone || !ch.in_flight) return illegal("ack without a block in flight");
    ch.lifecycle = AckLifecycle::Done;
    ch.in_flight.reset();
    ++ctx_.acks_ok;
    if (stay == S::Dispatch) {
      ch.list = ListKind::Write;
      t_.actions.push_back(MoveToWriteList{e.index});
      return done(S::Dispatch);
    }
    if (any_not_done()) return done(S::CollectAcks);
    return broadcast_eof();
  }

  bool any_not_done() const {
    return std::any_of(ctx_.channels.begin(), ctx_.channels.end(),
                       [](const ChannelCtx& c) { return c.lifecycle == AckLifecycle::NotDone; });
  }

  Transition<S> end_of_file() {
    if (ctx_.end_of_file) return illegal("EndOfFile repeated");
    if (!ctx_.scheduler.exhausted()) return illegal("blocks remain");
    ctx_.end_of_file = true;
    if (any_not_done()) {
      for (std::uint32_t i = 0; i < ctx_.channels.size(); ++i) {
        auto& ch = ctx_.channels[i];
        if (ch.list == ListKind::Write) {
          ch.list = ListKind::Read;
          t_.actions.push_back(MoveToReadList{i, ch.lifecycle});
        }
      }
      return done(S::CollectAcks);
    }
    return broadcast_eof();
  }

  Transition<S> broadcast_eof() {
    via(S::EofCheck);
    via(S::DrainSendBuffers);
    t_.actions.push_back(BroadcastEof{ChannelEvent::EOFT});
    for (std::uint32_t i = 0; i < ctx_.channels.size(); ++i) {
      auto& ch = ctx_.channels[i];
      ch.eof_sent = true;
      ch.lifecycle = AckLifecycle::NotDone;
      ch.list = ListKind::Read;
      t_.actions.push_back(MoveToReadList{i, AckLifecycle::NotDone});
    }
    return done(S::SendEofHeaders);
  }

  Transition<S> eof_ack(const ExceptionReceived& e) {
    if (!valid_index(e.index)) return illegal("no such channel");
    if (!e.exception.is_ok()) return fail("peer reported an error");
    auto& ch = ctx_.channels[e.index];
    if (!ch.eof_sent || ch.eof_done) return illegal("unexpected EOF ack");
    ch.lifecycle = AckLifecycle::Done;
    ch.eof_done = true;
    ++ctx_.eof_acks;
    if (ctx_.eof_acks == ctx_.channels.size()) {
      t_.actions.push_back(CloseSession{});
      return done(S::Terminate);
    }
    return done(S::SendEofHeaders);
  }

  // Receiver data plane

  Transition<S> receiver(const FsmEvent& ev) {
    if (auto* r = std::get_if<ReadReady>(&ev)) {
      if (!valid_index(r->index)) return illegal("no such channel");
      return done(from_);
    }
    if (auto* h = std::get_if<HeaderReceived>(&ev)) return header(*h);
    if (auto* d = std::get_if<BlockIoDone>(&ev)) {
      if (from_ != S::WriteBlocks) return illegal("no write pending");
      return io_done(d->block);
    }
    if (auto* p = std::get_if<PeerClosed>(&ev)) {
      if (from_ == S::CheckEof && valid_index(p->index) && ctx_.channels[p->index].eof_done)
        return done(S::CheckEof);
      return fail("peer closed mid-transfer");
    }
    return illegal("not legal on the receiving side");
  }

  bool pending_writes() const {
    return std::any_of(ctx_.channels.begin(), ctx_.channels.end(),
                       [](const ChannelCtx& c) { return c.pending_write.has_value(); });
  }

  Transition<S> reject(std::uint32_t i, wire::ExceptionCode code, const char* msg) {
    t_.actions.push_back(
        SendException{i, ExceptionHeader{wire::ExceptionStatus::Error, static_cast<std::uint16_t>(code), msg}});
    t_.actions.push_back(CloseSession{});
    return done(S::Error);
  }

  Transition<S> header(const HeaderReceived& h) {
    std::uint32_t i = h.index;
    if (!valid_index(i)) return illegal("no such channel");
    auto& ch = ctx_.channels[i];
    ChannelEvent ev = h.header.event;
    if (ev == ChannelEvent::NOOP) return done(from_);
    if (ev == ChannelEvent::EOFR) {
      ch.idle = true;
      return done(from_);
    }
    if (ev == ChannelEvent::EOFT) {
      if (ch.eof_done) return reject(i, wire::ExceptionCode::ProtocolViolation, "duplicate EOFT");
      if (pending_writes()) return reject(i, wire::ExceptionCode::ProtocolViolation, "EOFT with writes pending");
      ch.eof_done = true;
      t_.actions.push_back(SendException{i, ExceptionHeader::ok()});
      bool all = std::all_of(ctx_.channels.begin(), ctx_.channels.end(),
                             [](const ChannelCtx& c) { return c.eof_done; });
      if (!all) return done(S::CheckEof);
      if (from_ != S::CheckEof) via(S::CheckEof);
      t_.actions.push_back(CloseSession{});
      return done(S::Terminate);
    }
    if (ev != T::data_event && ev != ChannelEvent::CONM) {
      ch.idle = false;
      t_.actions.push_back(SendException{
          i, ExceptionHeader{wire::ExceptionStatus::Error,
                             static_cast<std::uint16_t>(wire::ExceptionCode::ModeNotImplemented),
                             std::string("mode not implemented: ") + wire::to_string(ev)}});
      return done(from_);
    }
    if (from_ == S::CheckEof) return reject(i, wire::ExceptionCode::ProtocolViolation, "block after EOFT");
    if (!h.header.block) return reject(i, wire::ExceptionCode::ProtocolViolation, "data header without block");
    const BlockDescriptor& b = *h.header.block;
    if (ch.pending_write) return reject(i, wire::ExceptionCode::ProtocolViolation, "block before previous ack");
    if (ch.eof_done) return reject(i, wire::ExceptionCode::ProtocolViolation, "block after EOFT");
    if (b.length == 0 || b.offset > UINT64_MAX - b.length ||
        (ctx_.params && b.length > ctx_.params->block_size) || (ctx_.file_size && b.end() > *ctx_.file_size))
      return reject(i, wire::ExceptionCode::OutOfRange, "block out of range");
    ch.idle = false;
    ch.pending_write = b;
    ++ch.blocks;
    t_.actions.push_back(WriteBlockToDisk{b});
    return done(S::WriteBlocks);
  }

  Transition<S> io_done(const BlockDescriptor& b) {
    for (std::uint32_t i = 0; i < ctx_.channels.size(); ++i) {
      auto& ch = ctx_.channels[i];
      if (ch.pending_write && *ch.pending_write == b) {
        ch.pending_write.reset();
        ++ctx_.blocks_written;
        t_.actions.push_back(SendException{i, ExceptionHeader::ok()});
        return done(pending_writes() ? S::WriteBlocks : S::Dispatch);
      }
    }
    return illegal("completion for a block that is not pending");
  }

  S from_;
  const Context& orig_;
  Context ctx_;
  Transition<S> t_;
};

template <typename S>
Transition<S> step_impl(S s, const Context& ctx, const FsmEvent& ev) {
  return Stepper<S>(s, ctx).run(ev);
}

template <typename S>
StepResult erase(Transition<S>&& t) {
  StepResult r;
  r.state = static_cast<std::uint8_t>(t.state);
  r.ctx = std::move(t.ctx);
  r.actions = std::move(t.actions);
  for (S p : t.path) r.path.push_back(static_cast<std::uint8_t>(p));
  r.illegal = std::move(t.illegal);
  return r;
}

std::string block_str(const BlockDescriptor& b) { return std::to_string(b.offset) + "+" + std::to_string(b.length); }

std::string header_str(const ChannelHeader& h) {
  std::string s = wire::to_string(h.event);
  if (h.block) s += "," + block_str(*h.block);
  return s;
}

std::string exception_str(const ExceptionHeader& e) {
  if (e.is_ok()) return "Ok";
  return "Error:" + std::to_string(e.code);
}

}  // namespace

const char* to_string(MachineKind k) noexcept {
  switch (k) {
    case MachineKind::ServerDownload: return "server-download";
    case MachineKind::ClientDownload: return "client-download";
    case MachineKind::ServerUpload: return "server-upload";
    case MachineKind::ClientUpload: return "client-upload";
  }
  return "?";
}

const char* to_string(ServerDownloadState s) noexcept {
  static constexpr const char* kNames[] = {"Authenticate", "ReceiveParams", "SessionLookup", "RegisterChannel",
                                           "ChannelsReady", "Dispatch", "SendBlocks", "MarkAwaitAck",
                                           "CollectAcks", "EofCheck", "DrainSendBuffers", "SendEofHeaders",
                                           "Terminate", "Error"};
  return kNames[static_cast<std::size_t>(s)];
}

const char* to_string(ClientDownloadState s) noexcept {
  static constexpr const char* kNames[] = {"Connect", "Authenticate", "SendRequest", "AllChannelsUp", "Dispatch",
                                           "WriteBlocks", "CheckEof", "Terminate", "Error"};
  return kNames[static_cast<std::size_t>(s)];
}

const char* to_string(ServerUploadState s) noexcept {
  static constexpr const char* kNames[] = {"Authenticate", "ReceiveParams", "SessionLookup", "RegisterChannel",
                                           "ChannelsReady", "Dispatch", "WriteBlocks", "CheckEof",
                                           "Terminate", "Error"};
  return kNames[static_cast<std::size_t>(s)];
}

const char* to_string(ClientUploadState s) noexcept {
  static constexpr const char* kNames[] = {"Connect", "Authenticate", "SendRequest", "AllChannelsUp", "Dispatch",
                                           "SendBlocks", "MarkAwaitAck", "CollectAcks", "EofCheck",
                                           "DrainSendBuffers", "SendEofHeaders", "Terminate", "Error"};
  return kNames[static_cast<std::size_t>(s)];
}

std::size_t state_count(MachineKind k) noexcept {
  switch (k) {
    case MachineKind::ServerDownload: return 14;
    case MachineKind::ClientDownload: return 9;
    case MachineKind::ServerUpload: return 10;
    case MachineKind::ClientUpload: return 13;
  }
  return 0;
}

const char* state_name(MachineKind k, std::uint8_t s) noexcept {
  if (s >= state_count(k)) return "?";
  switch (k) {
    case MachineKind::ServerDownload: return to_string(static_cast<ServerDownloadState>(s));
    case MachineKind::ClientDownload: return to_string(static_cast<ClientDownloadState>(s));
    case MachineKind::ServerUpload: return to_string(static_cast<ServerUploadState>(s));
    case MachineKind::ClientUpload: return to_string(static_cast<ClientUploadState>(s));
  }
  return "?";
}

bool is_sender(MachineKind k) noexcept { return k == MachineKind::ServerDownload || k == MachineKind::ClientUpload; }
bool is_server(MachineKind k) noexcept { return k == MachineKind::ServerDownload || k == MachineKind::ServerUpload; }

const char* to_string(AckLifecycle a) noexcept {
  switch (a) {
    case AckLifecycle::FirstTime: return "FirstTime";
    case AckLifecycle::NotDone: return "NotDone";
    case AckLifecycle::Done: return "Done";
  }
  return "?";
}

bool legal_lifecycle_step(AckLifecycle from, AckLifecycle to) noexcept {
  if (from == to) return true;
  return (from == AckLifecycle::FirstTime && to == AckLifecycle::NotDone) ||
         (from == AckLifecycle::NotDone && to == AckLifecycle::Done) ||
         (from == AckLifecycle::Done && to == AckLifecycle::NotDone);
}

EventKind kind_of(const FsmEvent& ev) noexcept { return static_cast<EventKind>(ev.index()); }

const char* to_string(EventKind k) noexcept {
  static constexpr const char* kNames[] = {"ChannelConnected", "NegotiationReceived", "ReadReady", "WriteReady",
                                           "HeaderReceived", "ExceptionReceived", "BlockIoDone", "DiskReady",
                                           "EndOfFile", "PeerClosed", "LocalError"};
  return kNames[static_cast<std::size_t>(k)];
}

std::string to_string(const FsmEvent& ev) {
  std::string name = to_string(kind_of(ev));
  std::string args = std::visit(
      overloaded{
          [](const ChannelConnected& e) { return std::to_string(e.index); },
          [](const NegotiationReceived& e) {
            const auto& r = e.request;
            return std::to_string(r.channel_index) + "/" + std::to_string(r.channel_count) + "," +
                   wire::to_string(r.direction) + ",bs=" + std::to_string(r.block_size);
          },
          [](const ReadReady& e) { return std::to_string(e.index); },
          [](const WriteReady& e) { return std::to_string(e.index); },
          [](const HeaderReceived& e) { return std::to_string(e.index) + "," + header_str(e.header); },
          [](const ExceptionReceived& e) { return std::to_string(e.index) + "," + exception_str(e.exception); },
          [](const BlockIoDone& e) { return block_str(e.block); },
          [](const DiskReady&) { return std::string(); },
          [](const EndOfFile&) { return std::string(); },
          [](const PeerClosed& e) { return std::to_string(e.index); },
          [](const LocalError& e) { return e.description; },
      },
      ev);
  if (args.empty()) return name;
  return name + "(" + args + ")";
}

ActionKind kind_of(const FsmAction& a) noexcept { return static_cast<ActionKind>(a.index()); }

const char* to_string(ActionKind k) noexcept {
  static constexpr const char* kNames[] = {"SendHeader", "SendBlockPayload", "SendException", "ReadBlockFromDisk",
                                           "WriteBlockToDisk", "MoveToReadList", "MoveToWriteList", "BroadcastEof",
                                           "CloseChannel", "CloseSession"};
  return kNames[static_cast<std::size_t>(k)];
}

std::string to_string(const FsmAction& a) {
  std::string name = to_string(kind_of(a));
  std::string args = std::visit(
      overloaded{
          [](const SendHeader& x) { return std::to_string(x.index) + "," + header_str(x.header); },
          [](const SendBlockPayload& x) { return std::to_string(x.index) + "," + block_str(x.block); },
          [](const SendException& x) { return std::to_string(x.index) + "," + exception_str(x.exception); },
          [](const ReadBlockFromDisk& x) { return block_str(x.block); },
          [](const WriteBlockToDisk& x) { return block_str(x.block); },
          [](const MoveToReadList& x) { return std::to_string(x.index) + "," + to_string(x.lifecycle); },
          [](const MoveToWriteList& x) { return std::to_string(x.index); },
          [](const BroadcastEof& x) { return std::string(wire::to_string(x.kind)); },
          [](const CloseChannel& x) { return std::to_string(x.index); },
          [](const CloseSession&) { return std::string(); },
      },
      a);
  if (args.empty()) return name;
  return name + "(" + args + ")";
}

std::string to_string(const std::vector<FsmAction>& actions) {
  if (actions.empty()) return "-";
  std::string s;
  for (const auto& a : actions) {
    if (!s.empty()) s += ";";
    s += to_string(a);
  }
  return s;
}

std::uint32_t action_mask(const std::vector<FsmAction>& actions) noexcept {
  std::uint32_t m = 0;
  for (const auto& a : actions) m |= 1u << static_cast<unsigned>(kind_of(a));
  return m;
}

std::string mask_to_string(std::uint32_t mask) {
  if (!mask) return "-";
  std::string s;
  for (unsigned k = 0; k < 10; ++k) {
    if (mask & (1u << k)) {
      if (!s.empty()) s += "|";
      s += to_string(static_cast<ActionKind>(k));
    }
  }
  return s;
}

Context initial_context(MachineKind kind, std::optional<std::uint64_t> file_size) {
  Context c;
  c.kind = kind;
  c.file_size = file_size;
  return c;
}

// Authenticate (servers) and Connect (clients) are both the first enumerator.
std::uint8_t initial_state(MachineKind) noexcept { return 0; }

Transition<ServerDownloadState> step_server_download(ServerDownloadState s, const Context& ctx, const FsmEvent& ev) {
  return step_impl(s, ctx, ev);
}
Transition<ClientDownloadState> step_client_download(ClientDownloadState s, const Context& ctx, const FsmEvent& ev) {
  return step_impl(s, ctx, ev);
}
Transition<ServerUploadState> step_server_upload(ServerUploadState s, const Context& ctx, const FsmEvent& ev) {
  return step_impl(s, ctx, ev);
}
Transition<ClientUploadState> step_client_upload(ClientUploadState s, const Context& ctx, const FsmEvent& ev) {
  return step_impl(s, ctx, ev);
}

StepResult step(MachineKind kind, std::uint8_t state, const Context& ctx, const FsmEvent& ev) {
  switch (kind) {
    case MachineKind::ServerDownload:
      return erase(step_server_download(static_cast<ServerDownloadState>(state), ctx, ev));
    case MachineKind::ClientDownload:
      return erase(step_client_download(static_cast<ClientDownloadState>(state), ctx, ev));
    case MachineKind::ServerUpload:
      return erase(step_server_upload(static_cast<ServerUploadState>(state), ctx, ev));
    case MachineKind::ClientUpload:
      return erase(step_client_upload(static_cast<ClientUploadState>(state), ctx, ev));
  }
  throw Error(Errc::InvariantViolation, "unknown machine kind");
}

bool is_terminate(MachineKind kind, std::uint8_t state) noexcept {
  return std::string_view(state_name(kind, state)) == "Terminate";
}
bool is_error(MachineKind kind, std::uint8_t state) noexcept {
  return std::string_view(state_name(kind, state)) == "Error";
}
bool is_absorbing(MachineKind kind, std::uint8_t state) noexcept {
  return is_terminate(kind, state) || is_error(kind, state);
}

std::vector<FsmEvent> Trace::events() const {
  std::vector<FsmEvent> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(r.event);
  return out;
}

std::string Trace::to_tsv() const {
  std::string out;
  for (const auto& r : rows) {
    out += state_name(kind, r.before);
    out += '\t';
    out += to_string(r.event);
    out += '\t';
    out += r.illegal ? "ILLEGAL(" + *r.illegal + ")" : to_string(r.actions);
    out += '\t';
    out += state_name(kind, r.after);
    out += '\n';
  }
  return out;
}

Machine::Machine(MachineKind kind, Context ctx)
    : kind_(kind), state_(initial_state(kind)), ctx_(std::move(ctx)) {
  ctx_.kind = kind;
  trace_.kind = kind;
  trace_.initial = ctx_;
}

StepResult Machine::step(const FsmEvent& ev) {
  StepResult r = fsm::step(kind_, state_, ctx_, ev);
  if (record_) trace_.rows.push_back(TraceRow{state_, ev, r.actions, r.illegal ? state_ : r.state, r.illegal});
  if (!r.illegal) {
    state_ = r.state;
    ctx_ = r.ctx;
  }
  return r;
}

Trace replay(MachineKind kind, const Context& initial, const std::vector<FsmEvent>& events) {
  Machine m(kind, initial);
  for (const auto& ev : events) m.step(ev);
  return m.trace();
}

// Declared tables

namespace {

constexpr std::uint32_t bit(ActionKind k) { return 1u << static_cast<unsigned>(k); }

constexpr std::uint32_t kNone = 0;
constexpr std::uint32_t kClose = bit(ActionKind::CloseSession);
constexpr std::uint32_t kSendBlock = bit(ActionKind::ReadBlockFromDisk) | bit(ActionKind::SendHeader) |
                                     bit(ActionKind::SendBlockPayload) | bit(ActionKind::MoveToReadList);
constexpr std::uint32_t kToWrite = bit(ActionKind::MoveToWriteList);
constexpr std::uint32_t kToRead = bit(ActionKind::MoveToReadList);
constexpr std::uint32_t kEof = bit(ActionKind::BroadcastEof) | bit(ActionKind::MoveToReadList);
constexpr std::uint32_t kExc = bit(ActionKind::SendException);
constexpr std::uint32_t kExcClose = kExc | kClose;
constexpr std::uint32_t kWrite = bit(ActionKind::WriteBlockToDisk);

using EK = EventKind;

template <typename S>
TableRow row(S from, EK ev, S to, std::uint32_t actions) {
  return TableRow{static_cast<std::uint8_t>(from), ev, static_cast<std::uint8_t>(to), actions};
}

template <typename S>
void server_front(std::vector<TableRow>& t) {
  t.push_back(row(S::Authenticate, EK::ChannelConnected, S::ReceiveParams, kNone));
  t.push_back(row(S::ReceiveParams, EK::NegotiationReceived, S::RegisterChannel, kNone));
  t.push_back(row(S::ReceiveParams, EK::NegotiationReceived, S::ChannelsReady, kNone));
  t.push_back(row(S::ReceiveParams, EK::NegotiationReceived, S::Error, kClose));
  t.push_back(row(S::RegisterChannel, EK::ChannelConnected, S::SessionLookup, kNone));
  t.push_back(row(S::SessionLookup, EK::NegotiationReceived, S::RegisterChannel, kNone));
  t.push_back(row(S::SessionLookup, EK::NegotiationReceived, S::ChannelsReady, kNone));
  t.push_back(row(S::SessionLookup, EK::NegotiationReceived, S::Error, kClose));
  for (S s : {S::Authenticate, S::ReceiveParams, S::SessionLookup, S::RegisterChannel, S::ChannelsReady}) {
    t.push_back(row(s, EK::PeerClosed, S::Error, kClose));
    t.push_back(row(s, EK::LocalError, S::Error, kClose));
  }
}

template <typename S>
void client_front(std::vector<TableRow>& t) {
  t.push_back(row(S::Connect, EK::ChannelConnected, S::SendRequest, kNone));
  t.push_back(row(S::SendRequest, EK::NegotiationReceived, S::Connect, kNone));
  t.push_back(row(S::SendRequest, EK::NegotiationReceived, S::AllChannelsUp, kNone));
  t.push_back(row(S::SendRequest, EK::NegotiationReceived, S::Error, kClose));
  for (S s : {S::Connect, S::SendRequest, S::AllChannelsUp}) {
    t.push_back(row(s, EK::PeerClosed, S::Error, kClose));
    t.push_back(row(s, EK::LocalError, S::Error, kClose));
  }
}

template <typename S>
void sender_plane(std::vector<TableRow>& t, S ready) {
  t.push_back(row(ready, EK::DiskReady, S::Dispatch, kToWrite));
  t.push_back(row(S::Dispatch, EK::WriteReady, S::Dispatch, kSendBlock));
  t.push_back(row(S::Dispatch, EK::ExceptionReceived, S::Dispatch, kToWrite));
  t.push_back(row(S::Dispatch, EK::ExceptionReceived, S::Error, kClose));
  t.push_back(row(S::Dispatch, EK::EndOfFile, S::CollectAcks, kToRead));
  t.push_back(row(S::Dispatch, EK::EndOfFile, S::CollectAcks, kNone));
  t.push_back(row(S::Dispatch, EK::EndOfFile, S::SendEofHeaders, kEof));
  t.push_back(row(S::Dispatch, EK::ReadReady, S::Dispatch, kNone));
  t.push_back(row(S::Dispatch, EK::PeerClosed, S::Error, kClose));
  t.push_back(row(S::Dispatch, EK::LocalError, S::Error, kClose));
  t.push_back(row(S::CollectAcks, EK::ExceptionReceived, S::CollectAcks, kNone));
  t.push_back(row(S::CollectAcks, EK::ExceptionReceived, S::SendEofHeaders, kEof));
  t.push_back(row(S::CollectAcks, EK::ExceptionReceived, S::Error, kClose));
  t.push_back(row(S::CollectAcks, EK::ReadReady, S::CollectAcks, kNone));
  t.push_back(row(S::CollectAcks, EK::PeerClosed, S::Error, kClose));
  t.push_back(row(S::CollectAcks, EK::LocalError, S::Error, kClose));
  t.push_back(row(S::SendEofHeaders, EK::ExceptionReceived, S::SendEofHeaders, kNone));
  t.push_back(row(S::SendEofHeaders, EK::ExceptionReceived, S::Terminate, kClose));
  t.push_back(row(S::SendEofHeaders, EK::ExceptionReceived, S::Error, kClose));
  t.push_back(row(S::SendEofHeaders, EK::ReadReady, S::SendEofHeaders, kNone));
  t.push_back(row(S::SendEofHeaders, EK::PeerClosed, S::SendEofHeaders, kNone));
  t.push_back(row(S::SendEofHeaders, EK::PeerClosed, S::Error, kClose));
  t.push_back(row(S::SendEofHeaders, EK::LocalError, S::Error, kClose));
}

template <typename S>
void receiver_plane(std::vector<TableRow>& t, S ready) {
  t.push_back(row(ready, EK::DiskReady, S::Dispatch, kToRead));
  t.push_back(row(S::Dispatch, EK::HeaderReceived, S::WriteBlocks, kWrite));
  t.push_back(row(S::Dispatch, EK::HeaderReceived, S::Dispatch, kNone));
  t.push_back(row(S::Dispatch, EK::HeaderReceived, S::Dispatch, kExc));
  t.push_back(row(S::Dispatch, EK::HeaderReceived, S::CheckEof, kExc));
  t.push_back(row(S::Dispatch, EK::HeaderReceived, S::Terminate, kExcClose));
  t.push_back(row(S::Dispatch, EK::HeaderReceived, S::Error, kExcClose));
  t.push_back(row(S::Dispatch, EK::ReadReady, S::Dispatch, kNone));
  t.push_back(row(S::Dispatch, EK::PeerClosed, S::Error, kClose));
  t.push_back(row(S::Dispatch, EK::LocalError, S::Error, kClose));
  t.push_back(row(S::WriteBlocks, EK::HeaderReceived, S::WriteBlocks, kWrite));
  t.push_back(row(S::WriteBlocks, EK::HeaderReceived, S::WriteBlocks, kNone));
  t.push_back(row(S::WriteBlocks, EK::HeaderReceived, S::WriteBlocks, kExc));
  t.push_back(row(S::WriteBlocks, EK::HeaderReceived, S::Error, kExcClose));
  t.push_back(row(S::WriteBlocks, EK::BlockIoDone, S::WriteBlocks, kExc));
  t.push_back(row(S::WriteBlocks, EK::BlockIoDone, S::Dispatch, kExc));
  t.push_back(row(S::WriteBlocks, EK::ReadReady, S::WriteBlocks, kNone));
  t.push_back(row(S::WriteBlocks, EK::PeerClosed, S::Error, kClose));
  t.push_back(row(S::WriteBlocks, EK::LocalError, S::Error, kClose));
  t.push_back(row(S::CheckEof, EK::HeaderReceived, S::CheckEof, kExc));
  t.push_back(row(S::CheckEof, EK::HeaderReceived, S::CheckEof, kNone));
  t.push_back(row(S::CheckEof, EK::HeaderReceived, S::Terminate, kExcClose));
  t.push_back(row(S::CheckEof, EK::HeaderReceived, S::Error, kExcClose));
  t.push_back(row(S::CheckEof, EK::ReadReady, S::CheckEof, kNone));
  t.push_back(row(S::CheckEof, EK::PeerClosed, S::CheckEof, kNone));
  t.push_back(row(S::CheckEof, EK::PeerClosed, S::Error, kClose));
  t.push_back(row(S::CheckEof, EK::LocalError, S::Error, kClose));
}

MachineTable build(MachineKind k) {
  MachineTable t;
  t.kind = k;
  switch (k) {
    case MachineKind::ServerDownload:
      server_front<ServerDownloadState>(t.rows);
      sender_plane(t.rows, ServerDownloadState::ChannelsReady);
      break;
    case MachineKind::ClientUpload:
      client_front<ClientUploadState>(t.rows);
      sender_plane(t.rows, ClientUploadState::AllChannelsUp);
      break;
    case MachineKind::ServerUpload:
      server_front<ServerUploadState>(t.rows);
      receiver_plane(t.rows, ServerUploadState::ChannelsReady);
      break;
    case MachineKind::ClientDownload:
      client_front<ClientDownloadState>(t.rows);
      receiver_plane(t.rows, ClientDownloadState::AllChannelsUp);
      break;
  }
  std::sort(t.rows.begin(), t.rows.end());
  return t;
}

template <typename A, typename B>
StateMap by_name(std::initializer_list<std::pair<A, B>> pairs) {
  StateMap m;
  for (auto [a, b] : pairs) m.pairs.emplace_back(static_cast<std::uint8_t>(a), static_cast<std::uint8_t>(b));
  return m;
}

}  // namespace

bool MachineTable::contains(const TableRow& r) const { return std::find(rows.begin(), rows.end(), r) != rows.end(); }

const MachineTable& transition_table(MachineKind kind) {
  static const MachineTable tables[] = {build(MachineKind::ServerDownload), build(MachineKind::ClientDownload),
                                        build(MachineKind::ServerUpload), build(MachineKind::ClientUpload)};
  return tables[static_cast<std::size_t>(kind)];
}

std::optional<std::uint8_t> StateMap::forward(std::uint8_t a) const {
  for (auto [x, y] : pairs)
    if (x == a) return y;
  return std::nullopt;
}

std::optional<std::uint8_t> StateMap::backward(std::uint8_t b) const {
  for (auto [x, y] : pairs)
    if (y == b) return x;
  return std::nullopt;
}

StateMap data_plane_map(MachineKind a, MachineKind b) {
  using SD = ServerDownloadState;
  using CU = ClientUploadState;
  using SU = ServerUploadState;
  using CD = ClientDownloadState;
  if (a == b) {
    StateMap m;
    for (std::uint8_t s = 0; s < state_count(a); ++s) m.pairs.emplace_back(s, s);
    return m;
  }
  if (a == MachineKind::ClientUpload && b == MachineKind::ServerDownload) {
    StateMap m = data_plane_map(b, a);
    for (auto& p : m.pairs) std::swap(p.first, p.second);
    return m;
  }
  if (a == MachineKind::ClientDownload && b == MachineKind::ServerUpload) {
    StateMap m = data_plane_map(b, a);
    for (auto& p : m.pairs) std::swap(p.first, p.second);
    return m;
  }
  if (a == MachineKind::ServerDownload && b == MachineKind::ClientUpload) {
    return by_name<SD, CU>({{SD::ChannelsReady, CU::AllChannelsUp},
                            {SD::Dispatch, CU::Dispatch},
                            {SD::SendBlocks, CU::SendBlocks},
                            {SD::MarkAwaitAck, CU::MarkAwaitAck},
                            {SD::CollectAcks, CU::CollectAcks},
                            {SD::EofCheck, CU::EofCheck},
                            {SD::DrainSendBuffers, CU::DrainSendBuffers},
                            {SD::SendEofHeaders, CU::SendEofHeaders},
                            {SD::Terminate, CU::Terminate},
                            {SD::Error, CU::Error}});
  }
  if (a == MachineKind::ServerUpload && b == MachineKind::ClientDownload) {
    return by_name<SU, CD>({{SU::ChannelsReady, CD::AllChannelsUp},
                            {SU::Dispatch, CD::Dispatch},
                            {SU::WriteBlocks, CD::WriteBlocks},
                            {SU::CheckEof, CD::CheckEof},
                            {SU::Terminate, CD::Terminate},
                            {SU::Error, CD::Error}});
  }
  throw Error(Errc::InvariantViolation, std::string("no duality between ") + to_string(a) + " and " + to_string(b));
}

namespace {

std::string describe(MachineKind k, const TableRow& r) {
  std::ostringstream os;
  os << to_string(k) << ": " << state_name(k, r.from) << " --" << to_string(r.event) << "--> "
     << state_name(k, r.to) << " [" << mask_to_string(r.actions) << "]";
  return os.str();
}

}  // namespace

DualityReport check_duality(const MachineTable& a, const MachineTable& b, const StateMap& map) {
  DualityReport rep;
  auto in_plane_a = [&](const TableRow& r) { return map.forward(r.from).has_value(); };
  auto in_plane_b = [&](const TableRow& r) { return map.backward(r.from).has_value(); };
  for (const auto& r : a.rows) {
    if (!in_plane_a(r)) continue;
    auto to = map.forward(r.to);
    TableRow image{*map.forward(r.from), r.event, to ? *to : std::uint8_t(0xff), r.actions};
    if (to && b.contains(image)) {
      ++rep.matched;
    } else {
      rep.mismatches.push_back("unmatched " + describe(a.kind, r));
    }
  }
  for (const auto& r : b.rows) {
    if (!in_plane_b(r)) continue;
    auto to = map.backward(r.to);
    TableRow image{*map.backward(r.from), r.event, to ? *to : std::uint8_t(0xff), r.actions};
    if (!to || !a.contains(image)) rep.mismatches.push_back("unmatched " + describe(b.kind, r));
  }
  return rep;
}

DualityReport check_duality(MachineKind a, MachineKind b) {
  return check_duality(transition_table(a), transition_table(b), data_plane_map(a, b));
}

}  // namespace xdfs::fsm
