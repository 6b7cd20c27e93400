#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "xdfs/wire.hpp"

namespace xdfs::piod {

using wire::BlockDescriptor;

// Demand-driven ascending block assignment.
class BlockScheduler {
 public:
  BlockScheduler() = default;
  BlockScheduler(std::uint64_t file_size, std::uint64_t block_size);

  std::optional<BlockDescriptor> next_block();
  bool exhausted() const noexcept { return next_offset_ >= file_size_; }

  std::uint64_t file_size() const noexcept { return file_size_; }
  std::uint64_t block_size() const noexcept { return block_size_; }
  std::uint64_t next_offset() const noexcept { return next_offset_; }
  std::uint64_t issued() const noexcept { return issued_; }
  std::uint64_t total_blocks() const noexcept;

  friend bool operator==(const BlockScheduler&, const BlockScheduler&) = default;

 private:
  std::uint64_t file_size_ = 0;
  std::uint64_t block_size_ = 1;
  std::uint64_t next_offset_ = 0;
  std::uint64_t issued_ = 0;
};

// Thread-count formulas, definitional forms.
std::uint64_t expected_threads_mt(std::span<const std::uint64_t> n_list);    // sum(n_i + 1)
std::uint64_t expected_threads_mtedp(std::uint64_t m);                       // m
std::uint64_t expected_threads_hybrid(std::uint64_t m, std::span<const std::uint64_t> s_list);  // 3 + m + sum(S_i + 1)

}  // namespace xdfs::piod
