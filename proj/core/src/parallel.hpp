#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace wepe::detail {

/// Runs fn(i) for i in [0, n) on up to `workers` threads using contiguous
/// chunks. Each index is processed exactly once, so results written to
/// per-index slots do not depend on the worker count.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  const std::size_t w = std::clamp<std::size_t>(workers > 0 ? static_cast<std::size_t>(workers) : 1, 1,
                                                std::max<std::size_t>(n, 1));
  if (w == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + w - 1) / w;
  for (std::size_t t = 0; t < w; ++t) {
    const std::size_t begin = t * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&, begin, end] {
      try {
        for (std::size_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace wepe::detail
