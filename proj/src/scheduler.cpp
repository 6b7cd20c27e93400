#include "xdfs/scheduler.hpp"

#include <algorithm>

namespace xdfs::piod {

BlockScheduler::BlockScheduler(std::uint64_t file_size, std::uint64_t block_size)
    : file_size_(file_size), block_size_(block_size) {
  if (block_size == 0 || block_size > UINT32_MAX) throw Error(Errc::InvariantViolation, "block size out of range");
}

std::optional<BlockDescriptor> BlockScheduler::next_block() {
  if (next_offset_ >= file_size_) return std::nullopt;
  BlockDescriptor d{next_offset_, static_cast<std::uint32_t>(std::min(block_size_, file_size_ - next_offset_))};
  next_offset_ += d.length;
  ++issued_;
  return d;
}

std::uint64_t BlockScheduler::total_blocks() const noexcept {
  return file_size_ / block_size_ + (file_size_ % block_size_ ? 1 : 0);
}

std::uint64_t expected_threads_mt(std::span<const std::uint64_t> n_list) {
  std::uint64_t t = 0;
  for (auto n : n_list) t += n + 1;
  return t;
}

std::uint64_t expected_threads_mtedp(std::uint64_t m) { return m; }

std::uint64_t expected_threads_hybrid(std::uint64_t m, std::span<const std::uint64_t> s_list) {
  std::uint64_t t = 3 + m;
  for (auto s : s_list) t += s + 1;
  return t;
}

}  // namespace xdfs::piod
