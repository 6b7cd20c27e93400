#pragma once

// Positional file streams and the two disk engines.
//
// Sync engine: the session thread reads/writes the file directly.
// Async engine: one disk thread per session, fed through a bounded ring.
// The receiver side hands WriteRequests to a BlockSink; the disk thread
// drains them in batches and merges runs that are adjacent by offset into a
// single vectored positional write. The sender side pulls blocks from a
// BlockSource which, in async mode, prefetches ascending blocks.

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "xdfs/census.hpp"
#include "xdfs/error.hpp"
#include "xdfs/wire.hpp"

namespace xdfs::storage {

using wire::BlockDescriptor;
using wire::Bytes;

enum class OpenMode { Read, WriteCreate };
enum class DiskEngineMode { Sync, Async };

const char* to_string(DiskEngineMode m) noexcept;
std::optional<DiskEngineMode> parse_disk_mode(std::string_view s) noexcept;

class FileStream {
 public:
  virtual ~FileStream() = default;

  virtual const std::string& path() const = 0;
  virtual OpenMode mode() const = 0;
  virtual std::uint64_t size() const = 0;

  // Short count only at end of data.
  virtual std::size_t read_at(std::uint64_t offset, std::span<std::uint8_t> out) = 0;
  virtual void write_at(std::uint64_t offset, wire::ByteView data) = 0;
  // Writes the buffers back to back starting at offset.
  virtual void write_vectored_at(std::uint64_t offset, std::span<const wire::ByteView> bufs);
  virtual void resize(std::uint64_t size) = 0;

  std::uint64_t bytes_written() const noexcept { return bytes_written_; }

 protected:
  std::uint64_t bytes_written_ = 0;
};

using FilePtr = std::unique_ptr<FileStream>;

// Local file addressed by a UTF-8 path. WriteCreate truncates or creates.
FilePtr open_stream(const std::string& path, OpenMode mode);

// Yields `total` zero bytes then end of data.
FilePtr zero_stream(std::uint64_t total);
// Discards writes; bytes_written() counts them.
FilePtr null_stream();

// min(d.length, size - d.offset) bytes from [d.offset, ...).
Bytes read_block(FileStream& fs, const BlockDescriptor& d);

struct WriteRequest {
  std::uint64_t offset = 0;
  Bytes data;

  BlockDescriptor descriptor() const { return {offset, static_cast<std::uint32_t>(data.size())}; }
};

// Bounded FIFO for one producer and one consumer.
template <typename T>
class RingBuffer {
 public:
  explicit RingBuffer(std::size_t capacity) : capacity_(capacity ? capacity : 1) {}

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t occupancy() const {
    std::lock_guard lk(mu_);
    return q_.size();
  }
  bool closed() const {
    std::lock_guard lk(mu_);
    return closed_;
  }

  // Fails when full or closed; the item is left untouched then.
  bool try_push(T& item) {
    {
      std::lock_guard lk(mu_);
      if (closed_ || q_.size() >= capacity_) return false;
      q_.push_back(std::move(item));
    }
    cv_.notify_all();
    return true;
  }

  // Blocks while full. False once closed.
  bool push(T item) {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return closed_ || q_.size() < capacity_; });
    if (closed_) return false;
    q_.push_back(std::move(item));
    lk.unlock();
    cv_.notify_all();
    return true;
  }

  std::optional<T> try_pop() {
    std::optional<T> out;
    {
      std::lock_guard lk(mu_);
      if (q_.empty()) return std::nullopt;
      out.emplace(std::move(q_.front()));
      q_.pop_front();
    }
    cv_.notify_all();
    return out;
  }

  const T* front() const {
    std::lock_guard lk(mu_);
    return q_.empty() ? nullptr : &q_.front();
  }

  // Waits for at least one item (or close) and moves out everything queued.
  // Empty result means closed and drained.
  std::vector<T> pop_batch() {
    std::vector<T> out;
    {
      std::unique_lock lk(mu_);
      cv_.wait(lk, [&] { return closed_ || !q_.empty(); });
      out.reserve(q_.size());
      while (!q_.empty()) {
        out.push_back(std::move(q_.front()));
        q_.pop_front();
      }
    }
    cv_.notify_all();
    return out;
  }

  std::vector<T> drain() {
    std::vector<T> out;
    {
      std::lock_guard lk(mu_);
      while (!q_.empty()) {
        out.push_back(std::move(q_.front()));
        q_.pop_front();
      }
    }
    cv_.notify_all();
    return out;
  }

  void close() {
    {
      std::lock_guard lk(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

 private:
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> q_;
  bool closed_ = false;
};

struct BatchRecord {
  std::size_t requests = 0;
  std::size_t runs = 0;
  std::size_t repositionings = 0;
  std::vector<BlockDescriptor> descriptors;  // as drained, before sorting
};

// Sorts the batch by offset and issues one vectored positional write per
// maximal contiguous run. Each run costs one repositioning.
BatchRecord write_coalesced(std::vector<WriteRequest>& batch, FileStream& fs);

// Drains whatever is queued in rb and writes it with write_coalesced.
// Returns the number of requests written.
std::size_t flush_coalesced(RingBuffer<WriteRequest>& rb, FileStream& fs, BatchRecord* record = nullptr);

// Count of maximal contiguous runs once sorted by offset.
std::size_t count_runs(std::vector<BlockDescriptor> blocks);

// read_block into a caller-supplied buffer; its capacity is reused.
void read_block_into(FileStream& fs, const BlockDescriptor& d, Bytes& out);

struct EngineConfig {
  DiskEngineMode mode = DiskEngineMode::Sync;
  std::size_t ring_slots = 64;
  ThreadCensus* census = nullptr;
  bool keep_batch_records = false;
};

struct EngineStats {
  std::uint64_t requests = 0;
  std::uint64_t bytes = 0;
  std::uint64_t batches = 0;
  std::uint64_t repositionings = 0;
};

// Receiver side.
class BlockSink {
 public:
  virtual ~BlockSink() = default;
  // False when the engine cannot take the request now (ring full); the
  // request is left intact for a retry. Sync engines write before returning.
  virtual bool submit(WriteRequest& w) = 0;
  // Requests durable since the last call, in completion order. Rethrows a
  // disk-thread failure.
  virtual std::vector<BlockDescriptor> take_completed() = 0;
  virtual bool pending() const = 0;
  // Flushes everything and stops the disk thread.
  virtual void finish() = 0;
  virtual EngineStats stats() const = 0;
  virtual std::vector<BatchRecord> batch_records() const { return {}; }
};

// Sender side. Blocks must be requested in ascending offset order.
class BlockSource {
 public:
  virtual ~BlockSource() = default;
  // True when take() for the next block would not wait.
  virtual bool ready() const = 0;
  virtual Bytes take(const BlockDescriptor& d) = 0;
  // Hands back a payload buffer once it has been sent.
  virtual void recycle(Bytes) {}
  virtual void finish() = 0;
};

std::unique_ptr<BlockSink> make_sink(FileStream& fs, const EngineConfig& cfg);
std::unique_ptr<BlockSource> make_source(FileStream& fs, std::uint64_t file_size, std::uint64_t block_size,
                                         const EngineConfig& cfg);

}  // namespace xdfs::storage
