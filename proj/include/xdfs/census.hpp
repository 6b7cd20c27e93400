#pragma once

#include <atomic>
#include <cstddef>

namespace xdfs {

// Runtime thread accounting. Every thread the library starts holds a Scope
// on the census it was handed for its whole lifetime. The starting thread
// creates the Scope and moves it into the new thread, so the count is exact
// as soon as the std::thread constructor returns.
class ThreadCensus {
 public:
  class Scope {
   public:
    explicit Scope(ThreadCensus* c) : c_(c) {
      if (c_) c_->live_.fetch_add(1, std::memory_order_acq_rel);
    }
    ~Scope() {
      if (c_) c_->live_.fetch_sub(1, std::memory_order_acq_rel);
    }
    Scope(Scope&& o) noexcept : c_(o.c_) { o.c_ = nullptr; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
    Scope& operator=(Scope&&) = delete;

   private:
    ThreadCensus* c_;
  };

  std::size_t live() const noexcept { return live_.load(std::memory_order_acquire); }

 private:
  std::atomic<std::size_t> live_{0};
};

}  // namespace xdfs
