#pragma once

// Binary codecs for every frame exchanged on an xDFS channel.
//
// All integers are little-endian. Layouts are documented byte-for-byte in
// docs/wire.md; the constants below are the normative sizes.

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xdfs/error.hpp"

namespace xdfs::wire {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

inline constexpr std::size_t kChannelHeaderSize = 13;
inline constexpr std::size_t kExceptionFixedSize = 7;
inline constexpr std::size_t kMaxExceptionMessage = 64 * 1024;
inline constexpr std::size_t kMaxStringField = 64 * 1024;
inline constexpr std::size_t kMaxExtendedEntries = 1024;
inline constexpr std::uint64_t kMinBlockSize = 4096;
inline constexpr std::uint64_t kMaxBlockSize = 1ull << 30;
inline constexpr std::array<std::uint8_t, 4> kNegotiationMagic = {'X', 'D', 'F', 'S'};

struct ProtocolVersion {
  std::uint8_t major = 1;
  std::uint8_t minor = 0;
  friend bool operator==(const ProtocolVersion&, const ProtocolVersion&) = default;
};

inline constexpr ProtocolVersion kCurrentVersion{1, 0};

// 16-byte GUID. The all-zero value is reserved.
struct SessionId {
  std::array<std::uint8_t, 16> bytes{};

  static SessionId generate();
  bool is_nil() const noexcept;
  std::string to_string() const;
  friend auto operator<=>(const SessionId&, const SessionId&) = default;
};

enum class ChannelEvent : std::uint8_t {
  EOFT = 0x00,
  EOFR = 0x01,
  XFTSMU = 0x02,
  XFTSM = 0x03,
  XPATHM = 0x04,
  NOOP = 0x05,
  CONM = 0x07,
  ZXDFS = 0x08,
};

inline constexpr std::array<ChannelEvent, 8> kAllChannelEvents = {
    ChannelEvent::EOFT, ChannelEvent::EOFR,  ChannelEvent::XFTSMU, ChannelEvent::XFTSM,
    ChannelEvent::XPATHM, ChannelEvent::NOOP, ChannelEvent::CONM,  ChannelEvent::ZXDFS};

std::optional<ChannelEvent> channel_event_from_opcode(std::uint8_t opcode) noexcept;
const char* to_string(ChannelEvent ev) noexcept;

// True for the events whose header addresses a file block.
constexpr bool carries_block(ChannelEvent ev) noexcept {
  return ev == ChannelEvent::XFTSM || ev == ChannelEvent::XFTSMU || ev == ChannelEvent::CONM;
}

struct BlockDescriptor {
  std::uint64_t offset = 0;
  std::uint32_t length = 0;

  std::uint64_t end() const noexcept { return offset + length; }
  friend auto operator<=>(const BlockDescriptor&, const BlockDescriptor&) = default;
};

struct ChannelHeader {
  ChannelEvent event = ChannelEvent::NOOP;
  std::optional<BlockDescriptor> block;
  friend bool operator==(const ChannelHeader&, const ChannelHeader&) = default;
};

enum class Direction : std::uint8_t { Upload, Download };

const char* to_string(Direction d) noexcept;

struct NegotiationRequest {
  ProtocolVersion protocol_version = kCurrentVersion;
  SessionId session_id;
  Direction direction = Direction::Download;
  std::uint32_t channel_index = 0;
  std::uint32_t channel_count = 1;
  std::string local_file_name;
  std::string remote_file_name;
  std::uint64_t tcp_window_size = 1 << 20;
  std::uint64_t block_size = 1 << 20;
  Bytes credentials;
  std::map<std::string, std::string> extended_mode;

  friend bool operator==(const NegotiationRequest&, const NegotiationRequest&) = default;
};

enum class ExceptionStatus : std::uint8_t { Ok = 0, Error = 1 };

struct ExceptionHeader {
  ExceptionStatus status = ExceptionStatus::Ok;
  std::uint16_t code = 0;
  std::string message;

  static ExceptionHeader ok() { return {}; }
  bool is_ok() const noexcept { return status == ExceptionStatus::Ok; }
  friend bool operator==(const ExceptionHeader&, const ExceptionHeader&) = default;
};

enum class ReplyStatus : std::uint8_t { Accepted = 0, Rejected = 1 };

struct NegotiationReply {
  ReplyStatus status = ReplyStatus::Accepted;
  SessionId session_id;
  std::uint16_t code = 0;  // Errc of a rejection, 0 when accepted
  std::string reason;
  std::uint64_t file_size = 0;

  friend bool operator==(const NegotiationReply&, const NegotiationReply&) = default;
};

// Reason codes carried in Error exception headers.
enum class ExceptionCode : std::uint16_t {
  None = 0,
  ProtocolViolation = 1,
  ModeNotImplemented = 2,
  OutOfRange = 3,
  LocalFailure = 4,
  DiskFull = 5,
};

void validate(const NegotiationRequest& req);
void validate(const ChannelHeader& h);
void validate(const BlockDescriptor& b);
void validate(const ExceptionHeader& e);
void validate(const NegotiationReply& r);

Bytes encode_negotiation(const NegotiationRequest& req);
NegotiationRequest decode_negotiation(ByteView data);

Bytes encode_channel_header(const ChannelHeader& h);
void encode_channel_header_into(const ChannelHeader& h, std::span<std::uint8_t, kChannelHeaderSize> out);
ChannelHeader decode_channel_header(ByteView data);

Bytes encode_exception(const ExceptionHeader& e);
ExceptionHeader decode_exception(ByteView data);

Bytes encode_reply(const NegotiationReply& r);
NegotiationReply decode_reply(ByteView data);

// Incremental framing for stream readers. `known` is set once the prefix
// determines the frame's total size; until then `size` is the number of bytes
// that must be present before the probe can make progress. Neither value ever
// exceeds the true frame size, so a reader never consumes past the frame.
// Malformed prefixes throw MalformedHeader.
struct FrameProbe {
  bool known = false;
  std::size_t size = 0;
};

FrameProbe peek_negotiation_size(ByteView data);
FrameProbe peek_exception_size(ByteView data);
FrameProbe peek_reply_size(ByteView data);

// The mode byte of a negotiation frame (offset 6) holds the channel event the
// client selects. Lets a server answer unsupported modes before full decode.
std::optional<ChannelEvent> peek_requested_mode(ByteView data);

bool is_valid_utf8(std::string_view s) noexcept;

}  // namespace xdfs::wire
