#pragma once

// The four xFTSM machines as pure step functions.
//
//   server download: registration front + sender data plane
//   client upload:   connection front   + sender data plane
//   server upload:   registration front + receiver data plane
//   client download: connection front   + receiver data plane
//
// A step never performs I/O. It returns the next state, the next context and
// the actions the runtime must execute. Events that are not legal in the
// current state come back as an IllegalTransition value with state and
// context unchanged.

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "xdfs/scheduler.hpp"
#include "xdfs/wire.hpp"

namespace xdfs::fsm {

using wire::BlockDescriptor;
using wire::ChannelEvent;
using wire::ChannelHeader;
using wire::ExceptionHeader;
using wire::NegotiationRequest;

// Numbers in comments are the figure state numbers.
enum class ServerDownloadState : std::uint8_t {
  Authenticate,      // 1
  ReceiveParams,     // 2..6
  SessionLookup,     // 7
  RegisterChannel,   // 8
  ChannelsReady,     // 9
  Dispatch,          // 10
  SendBlocks,        // 11
  MarkAwaitAck,      // 12
  CollectAcks,       // 13
  EofCheck,          // 15
  DrainSendBuffers,  // 16
  SendEofHeaders,    // 17
  Terminate,         // 18
  Error,
};

enum class ClientDownloadState : std::uint8_t {
  Connect,        // 1
  Authenticate,   // 2..4
  SendRequest,    // 5
  AllChannelsUp,  // 6
  Dispatch,       // 7
  WriteBlocks,    // 8
  CheckEof,       // 10
  Terminate,      // 12
  Error,
};

enum class ServerUploadState : std::uint8_t {
  Authenticate,
  ReceiveParams,
  SessionLookup,
  RegisterChannel,
  ChannelsReady,
  Dispatch,
  WriteBlocks,
  CheckEof,
  Terminate,
  Error,
};

enum class ClientUploadState : std::uint8_t {
  Connect,
  Authenticate,
  SendRequest,
  AllChannelsUp,
  Dispatch,
  SendBlocks,
  MarkAwaitAck,
  CollectAcks,
  EofCheck,
  DrainSendBuffers,
  SendEofHeaders,
  Terminate,
  Error,
};

enum class MachineKind : std::uint8_t { ServerDownload, ClientDownload, ServerUpload, ClientUpload };

const char* to_string(MachineKind k) noexcept;
const char* to_string(ServerDownloadState s) noexcept;
const char* to_string(ClientDownloadState s) noexcept;
const char* to_string(ServerUploadState s) noexcept;
const char* to_string(ClientUploadState s) noexcept;
const char* state_name(MachineKind k, std::uint8_t state) noexcept;
std::size_t state_count(MachineKind k) noexcept;

bool is_sender(MachineKind k) noexcept;
bool is_server(MachineKind k) noexcept;

enum class AckLifecycle : std::uint8_t { FirstTime, NotDone, Done };
const char* to_string(AckLifecycle a) noexcept;
bool legal_lifecycle_step(AckLifecycle from, AckLifecycle to) noexcept;

// Events

struct ChannelConnected {
  std::uint32_t index = 0;
  friend bool operator==(const ChannelConnected&, const ChannelConnected&) = default;
};
struct NegotiationReceived {
  NegotiationRequest request;
  friend bool operator==(const NegotiationReceived&, const NegotiationReceived&) = default;
};
struct ReadReady {
  std::uint32_t index = 0;
  friend bool operator==(const ReadReady&, const ReadReady&) = default;
};
struct WriteReady {
  std::uint32_t index = 0;
  friend bool operator==(const WriteReady&, const WriteReady&) = default;
};
struct HeaderReceived {
  std::uint32_t index = 0;
  ChannelHeader header;
  friend bool operator==(const HeaderReceived&, const HeaderReceived&) = default;
};
struct ExceptionReceived {
  std::uint32_t index = 0;
  ExceptionHeader exception;
  friend bool operator==(const ExceptionReceived&, const ExceptionReceived&) = default;
};
struct BlockIoDone {
  BlockDescriptor block;
  friend bool operator==(const BlockIoDone&, const BlockIoDone&) = default;
};
struct DiskReady {
  friend bool operator==(const DiskReady&, const DiskReady&) = default;
};
struct EndOfFile {
  friend bool operator==(const EndOfFile&, const EndOfFile&) = default;
};
struct PeerClosed {
  std::uint32_t index = 0;
  friend bool operator==(const PeerClosed&, const PeerClosed&) = default;
};
struct LocalError {
  std::string description;
  friend bool operator==(const LocalError&, const LocalError&) = default;
};

using FsmEvent = std::variant<ChannelConnected, NegotiationReceived, ReadReady, WriteReady, HeaderReceived,
                              ExceptionReceived, BlockIoDone, DiskReady, EndOfFile, PeerClosed, LocalError>;

// Same order as the variant alternatives.
enum class EventKind : std::uint8_t {
  ChannelConnected,
  NegotiationReceived,
  ReadReady,
  WriteReady,
  HeaderReceived,
  ExceptionReceived,
  BlockIoDone,
  DiskReady,
  EndOfFile,
  PeerClosed,
  LocalError,
};
inline constexpr std::size_t kEventKinds = 11;

EventKind kind_of(const FsmEvent& ev) noexcept;
const char* to_string(EventKind k) noexcept;
std::string to_string(const FsmEvent& ev);

// Actions

struct SendHeader {
  std::uint32_t index = 0;
  ChannelHeader header;
  friend bool operator==(const SendHeader&, const SendHeader&) = default;
};
struct SendBlockPayload {
  std::uint32_t index = 0;
  BlockDescriptor block;
  friend bool operator==(const SendBlockPayload&, const SendBlockPayload&) = default;
};
struct SendException {
  std::uint32_t index = 0;
  ExceptionHeader exception;
  friend bool operator==(const SendException&, const SendException&) = default;
};
struct ReadBlockFromDisk {
  BlockDescriptor block;
  friend bool operator==(const ReadBlockFromDisk&, const ReadBlockFromDisk&) = default;
};
// The runtime pairs the descriptor with the payload it buffered for the
// header that produced this action.
struct WriteBlockToDisk {
  BlockDescriptor block;
  friend bool operator==(const WriteBlockToDisk&, const WriteBlockToDisk&) = default;
};
struct MoveToReadList {
  std::uint32_t index = 0;
  AckLifecycle lifecycle = AckLifecycle::FirstTime;
  friend bool operator==(const MoveToReadList&, const MoveToReadList&) = default;
};
struct MoveToWriteList {
  std::uint32_t index = 0;
  friend bool operator==(const MoveToWriteList&, const MoveToWriteList&) = default;
};
struct BroadcastEof {
  ChannelEvent kind = ChannelEvent::EOFT;
  friend bool operator==(const BroadcastEof&, const BroadcastEof&) = default;
};
struct CloseChannel {
  std::uint32_t index = 0;
  friend bool operator==(const CloseChannel&, const CloseChannel&) = default;
};
struct CloseSession {
  friend bool operator==(const CloseSession&, const CloseSession&) = default;
};

using FsmAction = std::variant<SendHeader, SendBlockPayload, SendException, ReadBlockFromDisk, WriteBlockToDisk,
                               MoveToReadList, MoveToWriteList, BroadcastEof, CloseChannel, CloseSession>;

enum class ActionKind : std::uint8_t {
  SendHeader,
  SendBlockPayload,
  SendException,
  ReadBlockFromDisk,
  WriteBlockToDisk,
  MoveToReadList,
  MoveToWriteList,
  BroadcastEof,
  CloseChannel,
  CloseSession,
};

ActionKind kind_of(const FsmAction& a) noexcept;
const char* to_string(ActionKind k) noexcept;
std::string to_string(const FsmAction& a);
std::string to_string(const std::vector<FsmAction>& actions);
std::uint32_t action_mask(const std::vector<FsmAction>& actions) noexcept;
std::string mask_to_string(std::uint32_t mask);

// Context

enum class ListKind : std::uint8_t { None, Read, Write };

struct ChannelCtx {
  AckLifecycle lifecycle = AckLifecycle::FirstTime;
  ListKind list = ListKind::None;
  bool joined = false;
  std::optional<BlockDescriptor> in_flight;      // sender: sent, not yet acked
  std::optional<BlockDescriptor> pending_write;  // receiver: handed to disk, not yet durable
  bool eof_sent = false;
  bool eof_done = false;  // sender: EOF acked; receiver: EOFT seen
  bool idle = false;      // EOFR received
  std::uint64_t blocks = 0;

  friend bool operator==(const ChannelCtx&, const ChannelCtx&) = default;
};

struct Context {
  MachineKind kind = MachineKind::ServerDownload;
  std::optional<std::uint64_t> file_size;  // sender: source size; receiver: expected size if known
  std::uint32_t expected = 0;               // n, from the first negotiation
  std::uint32_t joined = 0;
  std::optional<NegotiationRequest> params;
  piod::BlockScheduler scheduler;
  bool end_of_file = false;
  std::vector<ChannelCtx> channels;
  std::uint64_t blocks_read = 0;
  std::uint64_t blocks_sent = 0;
  std::uint64_t acks_ok = 0;
  std::uint64_t blocks_written = 0;
  std::uint64_t eof_acks = 0;

  friend bool operator==(const Context&, const Context&) = default;
};

Context initial_context(MachineKind kind, std::optional<std::uint64_t> file_size = std::nullopt);
std::uint8_t initial_state(MachineKind kind) noexcept;

template <typename S>
struct Transition {
  S state{};
  Context ctx;
  std::vector<FsmAction> actions;
  std::vector<S> path;  // transient states visited on the way, in order
  std::optional<std::string> illegal;
};

Transition<ServerDownloadState> step_server_download(ServerDownloadState s, const Context& ctx, const FsmEvent& ev);
Transition<ClientDownloadState> step_client_download(ClientDownloadState s, const Context& ctx, const FsmEvent& ev);
Transition<ServerUploadState> step_server_upload(ServerUploadState s, const Context& ctx, const FsmEvent& ev);
Transition<ClientUploadState> step_client_upload(ClientUploadState s, const Context& ctx, const FsmEvent& ev);

// Kind-erased step used by the runtime and the tests.
struct StepResult {
  std::uint8_t state = 0;
  Context ctx;
  std::vector<FsmAction> actions;
  std::vector<std::uint8_t> path;
  std::optional<std::string> illegal;
};
StepResult step(MachineKind kind, std::uint8_t state, const Context& ctx, const FsmEvent& ev);
bool is_absorbing(MachineKind kind, std::uint8_t state) noexcept;
bool is_terminate(MachineKind kind, std::uint8_t state) noexcept;
bool is_error(MachineKind kind, std::uint8_t state) noexcept;

// Trace

struct TraceRow {
  std::uint8_t before = 0;
  FsmEvent event;
  std::vector<FsmAction> actions;
  std::uint8_t after = 0;
  std::optional<std::string> illegal;

  friend bool operator==(const TraceRow&, const TraceRow&) = default;
};

struct Trace {
  MachineKind kind = MachineKind::ServerDownload;
  Context initial;
  std::vector<TraceRow> rows;

  std::vector<FsmEvent> events() const;
  // state_before \t event \t actions \t state_after
  std::string to_tsv() const;
  friend bool operator==(const Trace&, const Trace&) = default;
};

Trace replay(MachineKind kind, const Context& initial, const std::vector<FsmEvent>& events);

class Machine {
 public:
  Machine(MachineKind kind, Context ctx);

  StepResult step(const FsmEvent& ev);

  MachineKind kind() const noexcept { return kind_; }
  std::uint8_t state() const noexcept { return state_; }
  const char* state_name() const noexcept { return fsm::state_name(kind_, state_); }
  const Context& context() const noexcept { return ctx_; }
  const Trace& trace() const noexcept { return trace_; }
  bool terminal() const noexcept { return is_absorbing(kind_, state_); }
  bool succeeded() const noexcept { return is_terminate(kind_, state_); }
  bool failed() const noexcept { return is_error(kind_, state_); }
  void set_recording(bool on) noexcept { record_ = on; }

 private:
  MachineKind kind_;
  std::uint8_t state_;
  Context ctx_;
  Trace trace_;
  bool record_ = true;
};

// Declared transition tables

struct TableRow {
  std::uint8_t from = 0;
  EventKind event = EventKind::DiskReady;
  std::uint8_t to = 0;
  std::uint32_t actions = 0;  // bit per ActionKind

  friend auto operator<=>(const TableRow&, const TableRow&) = default;
};

struct MachineTable {
  MachineKind kind = MachineKind::ServerDownload;
  std::vector<TableRow> rows;

  bool contains(const TableRow& r) const;
};

const MachineTable& transition_table(MachineKind kind);

// Maps data-plane states of machine a onto machine b.
struct StateMap {
  std::vector<std::pair<std::uint8_t, std::uint8_t>> pairs;
  std::optional<std::uint8_t> forward(std::uint8_t a) const;
  std::optional<std::uint8_t> backward(std::uint8_t b) const;
};

// The fixed bijection for server-download<->client-upload and
// server-upload<->client-download, or the identity when a == b.
StateMap data_plane_map(MachineKind a, MachineKind b);

struct DualityReport {
  std::size_t matched = 0;
  std::vector<std::string> mismatches;
  bool ok() const noexcept { return mismatches.empty(); }
};

DualityReport check_duality(const MachineTable& a, const MachineTable& b, const StateMap& map);
DualityReport check_duality(MachineKind a, MachineKind b);

}  // namespace xdfs::fsm
