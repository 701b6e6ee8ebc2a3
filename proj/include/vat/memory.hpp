#pragma once

#include <atomic>
#include <cstddef>
#include <new>

namespace vat::memory {

// Byte counters fed by TrackingAllocator. Every tensor buffer (values and
// gradients) goes through it, so live_bytes() is the resident tensor total.
std::size_t live_bytes() noexcept;
std::size_t peak_bytes() noexcept;
void reset_peak() noexcept;

namespace detail {
void on_alloc(std::size_t bytes) noexcept;
void on_free(std::size_t bytes) noexcept;
}  // namespace detail

template <typename T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    T* p = static_cast<T*>(::operator new(n * sizeof(T)));
    detail::on_alloc(n * sizeof(T));
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    detail::on_free(n * sizeof(T));
    ::operator delete(p);
  }

  template <typename U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace vat::memory
