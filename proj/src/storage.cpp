#include "xdfs/storage.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <sys/uio.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <climits>
#include <cstring>

namespace xdfs::storage {

namespace {

[[noreturn]] void io_failure(const std::string& what, int err) {
  throw Error(Errc::IoFailure, what + ": " + std::strerror(err));
}

class LocalFile final : public FileStream {
 public:
  LocalFile(std::string path, OpenMode mode, int fd, std::uint64_t size)
      : path_(std::move(path)), mode_(mode), fd_(fd), size_(size) {}
  ~LocalFile() override {
    if (fd_ >= 0) ::close(fd_);
  }

  const std::string& path() const override { return path_; }
  OpenMode mode() const override { return mode_; }
  std::uint64_t size() const override { return size_; }

  std::size_t read_at(std::uint64_t offset, std::span<std::uint8_t> out) override {
    std::size_t done = 0;
    while (done < out.size()) {
      ssize_t n = ::pread(fd_, out.data() + done, out.size() - done, static_cast<off_t>(offset + done));
      if (n < 0) {
        if (errno == EINTR) continue;
        io_failure("read " + path_, errno);
      }
      if (n == 0) break;
      done += static_cast<std::size_t>(n);
    }
    return done;
  }

  void write_at(std::uint64_t offset, wire::ByteView data) override {
    wire::ByteView one[1] = {data};
    write_vectored_at(offset, one);
  }

  void write_vectored_at(std::uint64_t offset, std::span<const wire::ByteView> bufs) override {
    if (mode_ != OpenMode::WriteCreate) throw Error(Errc::IoFailure, "write to read-only stream " + path_);
    std::vector<iovec> iov;
    iov.reserve(bufs.size());
    for (auto b : bufs) {
      if (!b.empty()) iov.push_back({const_cast<std::uint8_t*>(b.data()), b.size()});
    }
    std::size_t first = 0;
    std::uint64_t pos = offset;
    while (first < iov.size()) {
      int cnt = static_cast<int>(std::min<std::size_t>(iov.size() - first, IOV_MAX));
      ssize_t n = ::pwritev(fd_, iov.data() + first, cnt, static_cast<off_t>(pos));
      if (n < 0) {
        if (errno == EINTR) continue;
        io_failure("write " + path_, errno);
      }
      pos += static_cast<std::uint64_t>(n);
      bytes_written_ += static_cast<std::uint64_t>(n);
      std::size_t left = static_cast<std::size_t>(n);
      while (first < iov.size() && left >= iov[first].iov_len) {
        left -= iov[first].iov_len;
        ++first;
      }
      if (left) {
        iov[first].iov_base = static_cast<std::uint8_t*>(iov[first].iov_base) + left;
        iov[first].iov_len -= left;
      }
    }
    size_ = std::max(size_, pos);
  }

  void resize(std::uint64_t size) override {
    if (mode_ != OpenMode::WriteCreate) throw Error(Errc::IoFailure, "resize of read-only stream " + path_);
    if (::ftruncate(fd_, static_cast<off_t>(size)) != 0) io_failure("truncate " + path_, errno);
    size_ = size;
  }

 private:
  std::string path_;
  OpenMode mode_;
  int fd_;
  std::uint64_t size_;
};

class ZeroStream final : public FileStream {
 public:
  explicit ZeroStream(std::uint64_t total) : total_(total) {}
  const std::string& path() const override { return path_; }
  OpenMode mode() const override { return OpenMode::Read; }
  std::uint64_t size() const override { return total_; }
  std::size_t read_at(std::uint64_t offset, std::span<std::uint8_t> out) override {
    if (offset >= total_) return 0;
    std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(out.size(), total_ - offset));
    std::memset(out.data(), 0, n);
    return n;
  }
  void write_at(std::uint64_t, wire::ByteView) override { throw Error(Errc::IoFailure, "zero: is read-only"); }
  void resize(std::uint64_t) override { throw Error(Errc::IoFailure, "zero: is read-only"); }

 private:
  std::uint64_t total_;
  std::string path_ = "zero:";
};

class NullStream final : public FileStream {
 public:
  const std::string& path() const override { return path_; }
  OpenMode mode() const override { return OpenMode::WriteCreate; }
  std::uint64_t size() const override { return 0; }
  std::size_t read_at(std::uint64_t, std::span<std::uint8_t>) override { return 0; }
  void write_at(std::uint64_t, wire::ByteView data) override { bytes_written_ += data.size(); }
  void write_vectored_at(std::uint64_t, std::span<const wire::ByteView> bufs) override {
    for (auto b : bufs) bytes_written_ += b.size();
  }
  void resize(std::uint64_t) override {}

 private:
  std::string path_ = "null:";
};

}  // namespace

const char* to_string(DiskEngineMode m) noexcept { return m == DiskEngineMode::Sync ? "sync" : "async"; }

std::optional<DiskEngineMode> parse_disk_mode(std::string_view s) noexcept {
  if (s == "sync") return DiskEngineMode::Sync;
  if (s == "async") return DiskEngineMode::Async;
  return std::nullopt;
}

void FileStream::write_vectored_at(std::uint64_t offset, std::span<const wire::ByteView> bufs) {
  for (auto b : bufs) {
    write_at(offset, b);
    offset += b.size();
  }
}

FilePtr open_stream(const std::string& path, OpenMode mode) {
  if (path.empty()) throw Error(Errc::NotFound, "empty path");
  int flags = O_CLOEXEC | (mode == OpenMode::Read ? O_RDONLY : (O_WRONLY | O_CREAT | O_TRUNC));
  int fd = ::open(path.c_str(), flags, 0644);
  if (fd < 0) {
    int err = errno;
    if (err == ENOENT || err == ENOTDIR) throw Error(Errc::NotFound, path);
    if (err == EACCES || err == EPERM || err == EROFS) throw Error(Errc::PermissionDenied, path);
    io_failure("open " + path, err);
  }
  struct stat st {};
  if (::fstat(fd, &st) != 0) {
    int err = errno;
    ::close(fd);
    io_failure("stat " + path, err);
  }
  if (!S_ISREG(st.st_mode)) {
    ::close(fd);
    throw Error(Errc::NotFound, path + " is not a regular file");
  }
  return std::make_unique<LocalFile>(path, mode, fd, static_cast<std::uint64_t>(st.st_size));
}

FilePtr zero_stream(std::uint64_t total) { return std::make_unique<ZeroStream>(total); }
FilePtr null_stream() { return std::make_unique<NullStream>(); }

Bytes read_block(FileStream& fs, const BlockDescriptor& d) {
  Bytes out;
  read_block_into(fs, d, out);
  return out;
}

void read_block_into(FileStream& fs, const BlockDescriptor& d, Bytes& out) {
  std::uint64_t size = fs.size();
  if (d.offset > size) throw Error(Errc::IoFailure, "block offset beyond end of " + fs.path());
  std::size_t want = static_cast<std::size_t>(std::min<std::uint64_t>(d.length, size - d.offset));
  out.resize(want);
  std::size_t got = fs.read_at(d.offset, out);
  if (got != want) throw Error(Errc::IoFailure, "short read from " + fs.path());
}

std::size_t count_runs(std::vector<BlockDescriptor> blocks) {
  std::sort(blocks.begin(), blocks.end());
  std::size_t runs = 0;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (i == 0 || blocks[i - 1].end() != blocks[i].offset) ++runs;
  }
  return runs;
}

BatchRecord write_coalesced(std::vector<WriteRequest>& batch, FileStream& fs) {
  BatchRecord rec;
  rec.requests = batch.size();
  rec.descriptors.reserve(batch.size());
  for (const auto& w : batch) rec.descriptors.push_back(w.descriptor());
  std::stable_sort(batch.begin(), batch.end(),
                   [](const WriteRequest& a, const WriteRequest& b) { return a.offset < b.offset; });
  std::vector<wire::ByteView> run;
  std::size_t i = 0;
  while (i < batch.size()) {
    std::uint64_t start = batch[i].offset;
    std::uint64_t end = start;
    run.clear();
    while (i < batch.size() && batch[i].offset == end) {
      run.emplace_back(batch[i].data);
      end += batch[i].data.size();
      ++i;
    }
    fs.write_vectored_at(start, run);
    ++rec.runs;
    ++rec.repositionings;
  }
  return rec;
}

std::size_t flush_coalesced(RingBuffer<WriteRequest>& rb, FileStream& fs, BatchRecord* record) {
  auto batch = rb.drain();
  if (batch.empty()) {
    if (record) *record = {};
    return 0;
  }
  BatchRecord rec = write_coalesced(batch, fs);
  if (record) *record = std::move(rec);
  return batch.size();
}

namespace {

class SyncSink final : public BlockSink {
 public:
  explicit SyncSink(FileStream& fs) : fs_(fs) {}
  bool submit(WriteRequest& w) override {
    fs_.write_at(w.offset, w.data);
    done_.push_back(w.descriptor());
    ++stats_.requests;
    ++stats_.batches;
    ++stats_.repositionings;
    stats_.bytes += w.data.size();
    return true;
  }
  std::vector<BlockDescriptor> take_completed() override { return std::exchange(done_, {}); }
  bool pending() const override { return !done_.empty(); }
  void finish() override {}
  EngineStats stats() const override { return stats_; }

 private:
  FileStream& fs_;
  std::vector<BlockDescriptor> done_;
  EngineStats stats_;
};

class AsyncSink final : public BlockSink {
 public:
  AsyncSink(FileStream& fs, const EngineConfig& cfg)
      : fs_(fs), ring_(cfg.ring_slots), keep_records_(cfg.keep_batch_records) {
    thread_ = std::thread([this, scope = ThreadCensus::Scope(cfg.census)] { run(); });
  }
  ~AsyncSink() override {
    ring_.close();
    if (thread_.joinable()) thread_.join();
  }

  bool submit(WriteRequest& w) override {
    rethrow_failure();
    if (!ring_.try_push(w)) return false;
    outstanding_.fetch_add(1, std::memory_order_acq_rel);
    return true;
  }

  std::vector<BlockDescriptor> take_completed() override {
    std::vector<BlockDescriptor> out;
    {
      std::lock_guard lk(mu_);
      out.swap(done_);
    }
    outstanding_.fetch_sub(out.size(), std::memory_order_acq_rel);
    rethrow_failure();
    return out;
  }

  bool pending() const override { return outstanding_.load(std::memory_order_acquire) > 0; }

  void finish() override {
    ring_.close();
    if (thread_.joinable()) thread_.join();
    rethrow_failure();
  }

  EngineStats stats() const override {
    std::lock_guard lk(mu_);
    return stats_;
  }

  std::vector<BatchRecord> batch_records() const override {
    std::lock_guard lk(mu_);
    return records_;
  }

 private:
  void run() {
    for (;;) {
      auto batch = ring_.pop_batch();
      if (batch.empty()) return;
      try {
        std::uint64_t bytes = 0;
        for (const auto& w : batch) bytes += w.data.size();
        BatchRecord rec = write_coalesced(batch, fs_);
        std::lock_guard lk(mu_);
        for (const auto& d : rec.descriptors) done_.push_back(d);
        stats_.requests += rec.requests;
        stats_.bytes += bytes;
        stats_.batches += 1;
        stats_.repositionings += rec.repositionings;
        if (keep_records_) records_.push_back(std::move(rec));
      } catch (...) {
        std::lock_guard lk(mu_);
        failure_ = std::current_exception();
        ring_.close();
        return;
      }
    }
  }

  void rethrow_failure() {
    std::exception_ptr f;
    {
      std::lock_guard lk(mu_);
      f = failure_;
    }
    if (f) std::rethrow_exception(f);
  }

  FileStream& fs_;
  RingBuffer<WriteRequest> ring_;
  bool keep_records_;
  mutable std::mutex mu_;
  std::vector<BlockDescriptor> done_;
  std::vector<BatchRecord> records_;
  EngineStats stats_;
  std::exception_ptr failure_;
  std::atomic<std::size_t> outstanding_{0};
  std::thread thread_;
};

class SyncSource final : public BlockSource {
 public:
  explicit SyncSource(FileStream& fs) : fs_(fs) {}
  bool ready() const override { return true; }
  Bytes take(const BlockDescriptor& d) override {
    Bytes out;
    if (!spare_.empty()) {
      out = std::move(spare_.back());
      spare_.pop_back();
    }
    read_block_into(fs_, d, out);
    return out;
  }
  void recycle(Bytes b) override {
    if (spare_.size() < kMaxSpare) spare_.push_back(std::move(b));
  }
  void finish() override { spare_.clear(); }

 private:
  static constexpr std::size_t kMaxSpare = 16;
  FileStream& fs_;
  std::vector<Bytes> spare_;
};

struct Prefetched {
  BlockDescriptor block;
  Bytes data;
};

class AsyncSource final : public BlockSource {
 public:
  AsyncSource(FileStream& fs, std::uint64_t file_size, std::uint64_t block_size, const EngineConfig& cfg)
      : fs_(fs), file_size_(file_size), block_size_(block_size), ring_(cfg.ring_slots) {
    thread_ = std::thread([this, scope = ThreadCensus::Scope(cfg.census)] { run(); });
  }
  ~AsyncSource() override { stop(); }

  bool ready() const override {
    if (failed_.load(std::memory_order_acquire)) return true;
    return ring_.occupancy() > 0;
  }

  Bytes take(const BlockDescriptor& d) override {
    auto item = ring_.try_pop();
    if (!item) {
      rethrow_failure();
      throw Error(Errc::InvariantViolation, "block requested before it was prefetched");
    }
    if (item->block != d) throw Error(Errc::InvariantViolation, "blocks must be requested in ascending order");
    return std::move(item->data);
  }

  void finish() override { stop(); }

 private:
  void stop() {
    {
      std::lock_guard lk(mu_);
      stopping_ = true;
    }
    stop_cv_.notify_all();
    ring_.close();
    if (thread_.joinable()) thread_.join();
  }

  void run() {
    try {
      for (std::uint64_t off = 0; off < file_size_; off += block_size_) {
        BlockDescriptor d{off, static_cast<std::uint32_t>(std::min(block_size_, file_size_ - off))};
        Prefetched p{d, read_block(fs_, d)};
        if (!ring_.push(std::move(p))) return;
      }
    } catch (...) {
      std::lock_guard lk(mu_);
      failure_ = std::current_exception();
      failed_.store(true, std::memory_order_release);
    }
    // the disk thread belongs to the session until it is finished
    std::unique_lock lk(mu_);
    stop_cv_.wait(lk, [this] { return stopping_; });
  }

  void rethrow_failure() {
    std::exception_ptr f;
    {
      std::lock_guard lk(mu_);
      f = failure_;
    }
    if (f) std::rethrow_exception(f);
  }

  FileStream& fs_;
  std::uint64_t file_size_;
  std::uint64_t block_size_;
  RingBuffer<Prefetched> ring_;
  std::mutex mu_;
  std::exception_ptr failure_;
  std::atomic<bool> failed_{false};
  std::condition_variable stop_cv_;
  bool stopping_ = false;
  std::thread thread_;
};

}  // namespace

std::unique_ptr<BlockSink> make_sink(FileStream& fs, const EngineConfig& cfg) {
  if (cfg.mode == DiskEngineMode::Sync) return std::make_unique<SyncSink>(fs);
  return std::make_unique<AsyncSink>(fs, cfg);
}

std::unique_ptr<BlockSource> make_source(FileStream& fs, std::uint64_t file_size, std::uint64_t block_size,
                                         const EngineConfig& cfg) {
  if (block_size == 0) throw Error(Errc::InvariantViolation, "block size must be positive");
  if (cfg.mode == DiskEngineMode::Sync) return std::make_unique<SyncSource>(fs);
  return std::make_unique<AsyncSource>(fs, file_size, block_size, cfg);
}

}  // namespace xdfs::storage
