// gridgemm: per-worker buffer pool. Released buffers go to a power-of-two
// size-class free list instead of back to the system, so a repeated
// fixed-shape operation allocates only on its first iteration.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <unordered_set>
#include <vector>

#include "gridgemm/common.hpp"

namespace gridgemm {

class Pool;

/// Move-only handle to a pooled allocation. Contents after acquire are
/// unspecified; callers must fully overwrite them.
class PoolBuffer {
public:
  PoolBuffer() = default;
  PoolBuffer(PoolBuffer&& o) noexcept
      : ptr_(o.ptr_), capacity_(o.capacity_), owner_(o.owner_) {
    o.ptr_ = nullptr;
    o.capacity_ = 0;
    o.owner_ = nullptr;
  }
  PoolBuffer& operator=(PoolBuffer&& o) noexcept {
    if (this != &o) {
      reset();
      ptr_ = o.ptr_;
      capacity_ = o.capacity_;
      owner_ = o.owner_;
      o.ptr_ = nullptr;
      o.capacity_ = 0;
      o.owner_ = nullptr;
    }
    return *this;
  }
  PoolBuffer(const PoolBuffer&) = delete;
  PoolBuffer& operator=(const PoolBuffer&) = delete;
  ~PoolBuffer();  // releases back to the owning pool

  std::byte* data() const { return ptr_; }
  std::size_t capacity() const { return capacity_; }
  bool valid() const { return ptr_ != nullptr; }
  void reset();  // hand the buffer back to its pool

private:
  friend class Pool;
  PoolBuffer(std::byte* p, std::size_t cap, Pool* owner) : ptr_(p), capacity_(cap), owner_(owner) {}

  std::byte* ptr_ = nullptr;
  std::size_t capacity_ = 0;
  Pool* owner_ = nullptr;
};

class Pool {
public:
  struct Stats {
    std::uint64_t fresh_allocations = 0;
    std::uint64_t reuses = 0;
    std::uint64_t bytes_live = 0;
    std::uint64_t bytes_pooled = 0;
    std::uint64_t high_water = 0;  // peak bytes_live + bytes_pooled
  };

  static constexpr std::size_t kMinClass = 64;

  Pool() = default;
  Pool(const Pool&) = delete;
  Pool& operator=(const Pool&) = delete;
  ~Pool() = default;

  PoolBuffer acquire(std::size_t bytes) {
    if (bytes == 0) throw UsageError("pool_acquire: zero-byte request");
    const std::size_t cls = size_class(bytes);
    auto& list = free_lists_[cls];
    std::byte* p;
    if (!list.empty()) {
      p = list.back().release();
      list.pop_back();
      stats_.reuses += 1;
      stats_.bytes_pooled -= cls;
    } else {
      p = new std::byte[cls];
      stats_.fresh_allocations += 1;
    }
    stats_.bytes_live += cls;
    live_.insert(p);
    bump_high_water();
    return PoolBuffer(p, cls, this);
  }

  void release(PoolBuffer&& buf) {
    if (!buf.valid()) throw UsageError("pool_release: buffer already released");
    if (buf.owner_ != this || live_.find(buf.ptr_) == live_.end())
      throw UsageError("pool_release: buffer does not belong to this pool");
    live_.erase(buf.ptr_);
    stats_.bytes_live -= buf.capacity_;
    stats_.bytes_pooled += buf.capacity_;
    free_lists_[buf.capacity_].emplace_back(buf.ptr_);
    buf.ptr_ = nullptr;
    buf.owner_ = nullptr;
    buf.capacity_ = 0;
  }

  /// Frees every pooled buffer back to the system; live buffers stay live.
  std::uint64_t trim() {
    std::uint64_t freed = stats_.bytes_pooled;
    free_lists_.clear();
    stats_.bytes_pooled = 0;
    return freed;
  }

  const Stats& stats() const { return stats_; }

  static std::size_t size_class(std::size_t bytes) {
    std::size_t cls = kMinClass;
    while (cls < bytes) cls <<= 1;
    return cls;
  }

private:
  void bump_high_water() {
    const std::uint64_t total = stats_.bytes_live + stats_.bytes_pooled;
    if (total > stats_.high_water) stats_.high_water = total;
  }

  std::map<std::size_t, std::vector<std::unique_ptr<std::byte[]>>> free_lists_;
  std::unordered_set<const std::byte*> live_;
  Stats stats_;
};

inline void PoolBuffer::reset() {
  if (ptr_ != nullptr && owner_ != nullptr) owner_->release(std::move(*this));
}

inline PoolBuffer::~PoolBuffer() { reset(); }

}  // namespace gridgemm
