#include "xdfs/wire.hpp"

#include <algorithm>
#include <cstring>
#include <random>

namespace xdfs::wire {

namespace {

constexpr std::size_t kNegotiationFixedSize = 43;
constexpr std::size_t kReplyFixedSize = 31;
constexpr std::size_t kMaxExtendedField = 256 * 1024;

[[noreturn]] void malformed(const std::string& what) { throw Error(Errc::MalformedHeader, what); }
[[noreturn]] void violation(const std::string& what) { throw Error(Errc::InvariantViolation, what); }

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void raw(const void* p, std::size_t n) {
    auto b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void field(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::size_t size() const { return out_.size(); }
  void patch_u32(std::size_t at, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
  }
  Bytes take() { return std::move(out_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  Bytes out_;
};

class Reader {
 public:
  explicit Reader(ByteView data) : data_(data) {}

  bool has(std::size_t n) const { return data_.size() - pos_ >= n; }
  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::string field(std::size_t cap, const char* name) {
    std::uint32_t len = u32();
    if (len > cap) malformed(std::string(name) + " length exceeds cap");
    need(len);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), len);
    pos_ += len;
    return s;
  }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }

 private:
  void need(std::size_t n) const {
    if (!has(n)) malformed("truncated frame");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  ByteView data_;
  std::size_t pos_ = 0;
};

std::uint32_t read_le32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

void check_string(std::string_view s, std::size_t cap, const char* name) {
  if (s.size() > cap) violation(std::string(name) + " too long");
  if (!is_valid_utf8(s)) violation(std::string(name) + " is not valid UTF-8");
}

std::optional<Direction> direction_from_mode(std::uint8_t mode) {
  if (mode == static_cast<std::uint8_t>(ChannelEvent::XFTSMU)) return Direction::Upload;
  if (mode == static_cast<std::uint8_t>(ChannelEvent::XFTSM)) return Direction::Download;
  return std::nullopt;
}

std::uint8_t mode_from_direction(Direction d) {
  return static_cast<std::uint8_t>(d == Direction::Upload ? ChannelEvent::XFTSMU : ChannelEvent::XFTSM);
}

}  // namespace

SessionId SessionId::generate() {
  thread_local std::mt19937_64 rng{std::random_device{}() ^ (static_cast<std::uint64_t>(std::random_device{}()) << 32)};
  SessionId id;
  for (;;) {
    for (std::size_t i = 0; i < id.bytes.size(); i += 8) {
      std::uint64_t v = rng();
      std::memcpy(id.bytes.data() + i, &v, 8);
    }
    // RFC 4122 version 4 / variant 1 bits
    id.bytes[6] = static_cast<std::uint8_t>((id.bytes[6] & 0x0f) | 0x40);
    id.bytes[8] = static_cast<std::uint8_t>((id.bytes[8] & 0x3f) | 0x80);
    if (!id.is_nil()) return id;
  }
}

bool SessionId::is_nil() const noexcept {
  return std::all_of(bytes.begin(), bytes.end(), [](std::uint8_t b) { return b == 0; });
}

std::string SessionId::to_string() const {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  s.reserve(36);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    if (i == 4 || i == 6 || i == 8 || i == 10) s.push_back('-');
    s.push_back(kHex[bytes[i] >> 4]);
    s.push_back(kHex[bytes[i] & 0xf]);
  }
  return s;
}

std::optional<ChannelEvent> channel_event_from_opcode(std::uint8_t opcode) noexcept {
  for (ChannelEvent ev : kAllChannelEvents) {
    if (static_cast<std::uint8_t>(ev) == opcode) return ev;
  }
  return std::nullopt;
}

const char* to_string(ChannelEvent ev) noexcept {
  switch (ev) {
    case ChannelEvent::EOFT: return "EOFT";
    case ChannelEvent::EOFR: return "EOFR";
    case ChannelEvent::XFTSMU: return "XFTSMU";
    case ChannelEvent::XFTSM: return "XFTSM";
    case ChannelEvent::XPATHM: return "XPATHM";
    case ChannelEvent::NOOP: return "NOOP";
    case ChannelEvent::CONM: return "CONM";
    case ChannelEvent::ZXDFS: return "ZXDFS";
  }
  return "?";
}

const char* to_string(Direction d) noexcept { return d == Direction::Upload ? "upload" : "download"; }

bool is_valid_utf8(std::string_view s) noexcept {
  auto p = reinterpret_cast<const unsigned char*>(s.data());
  std::size_t n = s.size();
  std::size_t i = 0;
  while (i < n) {
    unsigned char c = p[i];
    if (c < 0x80) {
      ++i;
      continue;
    }
    std::size_t len;
    std::uint32_t cp;
    if ((c & 0xe0) == 0xc0) {
      len = 2;
      cp = c & 0x1f;
    } else if ((c & 0xf0) == 0xe0) {
      len = 3;
      cp = c & 0x0f;
    } else if ((c & 0xf8) == 0xf0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (n - i < len) return false;
    for (std::size_t k = 1; k < len; ++k) {
      if ((p[i + k] & 0xc0) != 0x80) return false;
      cp = (cp << 6) | (p[i + k] & 0x3f);
    }
    static constexpr std::uint32_t kMinForLen[] = {0, 0, 0x80, 0x800, 0x10000};
    if (cp < kMinForLen[len] || cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff)) return false;
    i += len;
  }
  return true;
}

void validate(const BlockDescriptor& b) {
  if (b.length == 0) violation("block length must be at least 1");
  if (b.offset > UINT64_MAX - b.length) violation("block end overflows 64 bits");
}

void validate(const NegotiationRequest& req) {
  if (req.protocol_version != kCurrentVersion) violation("unsupported protocol version");
  if (req.session_id.is_nil()) violation("nil session id");
  if (req.channel_count < 1 || req.channel_count > 65535) violation("channel_count out of range");
  if (req.channel_index >= req.channel_count) violation("channel_index must be below channel_count");
  if (req.block_size < kMinBlockSize || req.block_size > kMaxBlockSize) violation("block_size out of range");
  if (req.remote_file_name.empty()) violation("remote_file_name is empty");
  check_string(req.local_file_name, kMaxStringField, "local_file_name");
  check_string(req.remote_file_name, kMaxStringField, "remote_file_name");
  if (req.credentials.size() > kMaxStringField) violation("credentials too long");
  if (req.extended_mode.size() > kMaxExtendedEntries) violation("too many extended_mode entries");
  std::size_t ext = 4;
  for (const auto& [k, v] : req.extended_mode) {
    check_string(k, kMaxStringField, "extended_mode key");
    check_string(v, kMaxStringField, "extended_mode value");
    ext += 8 + k.size() + v.size();
  }
  if (ext > kMaxExtendedField) violation("extended_mode too large");
}

void validate(const ChannelHeader& h) {
  if (carries_block(h.event)) {
    if (!h.block) violation(std::string(to_string(h.event)) + " header requires a block descriptor");
    validate(*h.block);
  } else if (h.block) {
    violation(std::string(to_string(h.event)) + " header must not carry a block descriptor");
  }
}

void validate(const ExceptionHeader& e) {
  if (e.status != ExceptionStatus::Ok && e.status != ExceptionStatus::Error) violation("bad exception status");
  if (e.status == ExceptionStatus::Ok && (e.code != 0 || !e.message.empty()))
    violation("Ok exception must have code 0 and empty message");
  check_string(e.message, kMaxExceptionMessage, "exception message");
}

void validate(const NegotiationReply& r) {
  if (r.status != ReplyStatus::Accepted && r.status != ReplyStatus::Rejected) violation("bad reply status");
  if (r.status == ReplyStatus::Rejected && r.reason.empty()) violation("rejected reply needs a reason");
  if (r.status == ReplyStatus::Accepted && (!r.reason.empty() || r.code != 0))
    violation("accepted reply must have empty reason and code 0");
  check_string(r.reason, kMaxStringField, "reply reason");
}

// ---------------------------------------------------------------- negotiation

Bytes encode_negotiation(const NegotiationRequest& req) {
  validate(req);
  Writer w;
  w.raw(kNegotiationMagic.data(), kNegotiationMagic.size());
  w.u8(req.protocol_version.major);
  w.u8(req.protocol_version.minor);
  w.u8(mode_from_direction(req.direction));
  w.raw(req.session_id.bytes.data(), req.session_id.bytes.size());
  w.u16(static_cast<std::uint16_t>(req.channel_index));
  w.u16(static_cast<std::uint16_t>(req.channel_count));
  w.u64(req.tcp_window_size);
  w.u64(req.block_size);
  w.field(req.local_file_name);
  w.field(req.remote_file_name);
  w.field(std::string_view(reinterpret_cast<const char*>(req.credentials.data()), req.credentials.size()));
  std::size_t ext_len_at = w.size();
  w.u32(0);
  w.u32(static_cast<std::uint32_t>(req.extended_mode.size()));
  for (const auto& [k, v] : req.extended_mode) {
    w.field(k);
    w.field(v);
  }
  w.patch_u32(ext_len_at, static_cast<std::uint32_t>(w.size() - ext_len_at - 4));
  return w.take();
}

std::optional<ChannelEvent> peek_requested_mode(ByteView data) {
  if (data.size() < 7) return std::nullopt;
  return channel_event_from_opcode(data[6]);
}

FrameProbe peek_negotiation_size(ByteView data) {
  std::size_t have = std::min(data.size(), kNegotiationMagic.size());
  if (!std::equal(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(have), kNegotiationMagic.begin()))
    malformed("bad magic");
  if (data.size() < kNegotiationFixedSize) return {false, kNegotiationFixedSize + 16};
  std::size_t pos = kNegotiationFixedSize;
  static constexpr std::size_t kCaps[] = {kMaxStringField, kMaxStringField, kMaxStringField, kMaxExtendedField};
  for (std::size_t i = 0; i < 4; ++i) {
    // each remaining field contributes at least its 4-byte prefix
    std::size_t floor = pos + 4 * (4 - i);
    if (data.size() < pos + 4) return {false, floor};
    std::uint32_t len = read_le32(data.data() + pos);
    if (len > kCaps[i]) malformed("field length exceeds cap");
    pos += 4 + len;
  }
  return {true, pos};
}

NegotiationRequest decode_negotiation(ByteView data) {
  Reader r(data);
  std::array<std::uint8_t, 4> magic{};
  r.raw(magic.data(), magic.size());
  if (magic != kNegotiationMagic) malformed("bad magic");
  NegotiationRequest req;
  req.protocol_version.major = r.u8();
  req.protocol_version.minor = r.u8();
  if (req.protocol_version != kCurrentVersion) {
    malformed("unsupported version " + std::to_string(req.protocol_version.major) + "." +
              std::to_string(req.protocol_version.minor));
  }
  auto dir = direction_from_mode(r.u8());
  if (!dir) malformed("mode byte is not an xFTSM direction");
  req.direction = *dir;
  r.raw(req.session_id.bytes.data(), req.session_id.bytes.size());
  req.channel_index = r.u16();
  req.channel_count = r.u16();
  req.tcp_window_size = r.u64();
  req.block_size = r.u64();
  req.local_file_name = r.field(kMaxStringField, "local_file_name");
  req.remote_file_name = r.field(kMaxStringField, "remote_file_name");
  std::string creds = r.field(kMaxStringField, "credentials");
  req.credentials.assign(creds.begin(), creds.end());

  std::uint32_t ext_len = r.u32();
  if (ext_len > kMaxExtendedField) malformed("extended_mode length exceeds cap");
  if (r.remaining() != ext_len) malformed("extended_mode length does not match frame");
  std::size_t ext_start = r.position();
  std::uint32_t count = r.u32();
  if (count > kMaxExtendedEntries) malformed("too many extended_mode entries");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string k = r.field(kMaxStringField, "extended_mode key");
    std::string v = r.field(kMaxStringField, "extended_mode value");
    if (!req.extended_mode.empty() && !(req.extended_mode.rbegin()->first < k))
      malformed("extended_mode keys not strictly ascending");
    req.extended_mode.emplace_hint(req.extended_mode.end(), std::move(k), std::move(v));
  }
  if (r.position() - ext_start != ext_len) malformed("extended_mode length mismatch");

  for (const std::string* s : {&req.local_file_name, &req.remote_file_name}) {
    if (!is_valid_utf8(*s)) malformed("file name is not valid UTF-8");
  }
  for (const auto& [k, v] : req.extended_mode) {
    if (!is_valid_utf8(k) || !is_valid_utf8(v)) malformed("extended_mode entry is not valid UTF-8");
  }
  validate(req);
  return req;
}

// ------------------------------------------------------------ channel header

void encode_channel_header_into(const ChannelHeader& h, std::span<std::uint8_t, kChannelHeaderSize> out) {
  validate(h);
  std::uint64_t off = h.block ? h.block->offset : 0;
  std::uint32_t len = h.block ? h.block->length : 0;
  out[0] = static_cast<std::uint8_t>(h.event);
  for (int i = 0; i < 8; ++i) out[1 + i] = static_cast<std::uint8_t>(off >> (8 * i));
  for (int i = 0; i < 4; ++i) out[9 + i] = static_cast<std::uint8_t>(len >> (8 * i));
}

Bytes encode_channel_header(const ChannelHeader& h) {
  Bytes out(kChannelHeaderSize);
  encode_channel_header_into(h, std::span<std::uint8_t, kChannelHeaderSize>(out.data(), kChannelHeaderSize));
  return out;
}

ChannelHeader decode_channel_header(ByteView data) {
  if (data.size() != kChannelHeaderSize) {
    malformed("channel header must be " + std::to_string(kChannelHeaderSize) + " bytes, got " +
              std::to_string(data.size()));
  }
  Reader r(data);
  std::uint8_t opcode = r.u8();
  auto ev = channel_event_from_opcode(opcode);
  if (!ev) throw Error(Errc::UnknownChannelEvent, "opcode " + std::to_string(opcode));
  std::uint64_t off = r.u64();
  std::uint32_t len = r.u32();
  ChannelHeader h{*ev, std::nullopt};
  if (carries_block(*ev)) {
    h.block = BlockDescriptor{off, len};
    validate(*h.block);
  } else if (off != 0 || len != 0) {
    malformed(std::string(to_string(*ev)) + " header has nonzero block fields");
  }
  return h;
}

// ---------------------------------------------------------------- exception

Bytes encode_exception(const ExceptionHeader& e) {
  validate(e);
  Writer w;
  w.u8(static_cast<std::uint8_t>(e.status));
  w.u16(e.code);
  w.field(e.message);
  return w.take();
}

FrameProbe peek_exception_size(ByteView data) {
  if (data.size() < kExceptionFixedSize) return {false, kExceptionFixedSize};
  std::uint32_t len = read_le32(data.data() + 3);
  if (len > kMaxExceptionMessage) malformed("exception message length exceeds cap");
  return {true, kExceptionFixedSize + len};
}

ExceptionHeader decode_exception(ByteView data) {
  Reader r(data);
  ExceptionHeader e;
  std::uint8_t status = r.u8();
  if (status > 1) malformed("bad exception status " + std::to_string(status));
  e.status = static_cast<ExceptionStatus>(status);
  e.code = r.u16();
  e.message = r.field(kMaxExceptionMessage, "exception message");
  if (r.remaining() != 0) malformed("trailing bytes after exception header");
  if (!is_valid_utf8(e.message)) malformed("exception message is not valid UTF-8");
  validate(e);
  return e;
}

// -------------------------------------------------------------------- reply

Bytes encode_reply(const NegotiationReply& rep) {
  validate(rep);
  Writer w;
  w.u8(static_cast<std::uint8_t>(rep.status));
  w.raw(rep.session_id.bytes.data(), rep.session_id.bytes.size());
  w.u16(rep.code);
  w.u64(rep.file_size);
  w.field(rep.reason);
  return w.take();
}

FrameProbe peek_reply_size(ByteView data) {
  if (data.size() < kReplyFixedSize) return {false, kReplyFixedSize};
  std::uint32_t len = read_le32(data.data() + kReplyFixedSize - 4);
  if (len > kMaxStringField) malformed("reply reason length exceeds cap");
  return {true, kReplyFixedSize + len};
}

NegotiationReply decode_reply(ByteView data) {
  Reader r(data);
  NegotiationReply rep;
  std::uint8_t status = r.u8();
  if (status > 1) malformed("bad reply status");
  rep.status = static_cast<ReplyStatus>(status);
  r.raw(rep.session_id.bytes.data(), rep.session_id.bytes.size());
  rep.code = r.u16();
  rep.file_size = r.u64();
  rep.reason = r.field(kMaxStringField, "reply reason");
  if (r.remaining() != 0) malformed("trailing bytes after reply");
  if (!is_valid_utf8(rep.reason)) malformed("reply reason is not valid UTF-8");
  validate(rep);
  return rep;
}

}  // namespace xdfs::wire
