#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace maskforge {

/// Kernel thread cap from MASKFORGE_THREADS (default 1).
inline std::size_t kernel_threads() {
  static const std::size_t threads = [] {
    const char* env = std::getenv("MASKFORGE_THREADS");
    if (!env) return std::size_t{1};
    try {
      const long v = std::stol(env);
      return v < 1 ? std::size_t{1} : static_cast<std::size_t>(v);
    } catch (...) {
      return std::size_t{1};
    }
  }();
  return threads;
}

/// Runs fn(i) for i in [0, n). Each index is handled by exactly one thread,
/// so results do not depend on the thread count as long as fn(i) writes only
/// to slots owned by i.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t threads = std::min(kernel_threads(), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = t * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] {
      for (std::size_t i = begin; i < end; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

/// Keeps large tensor buffers on the heap instead of fresh mmap regions, which
/// otherwise page-fault on every step. Process-wide; call once from main.
inline void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace maskforge
