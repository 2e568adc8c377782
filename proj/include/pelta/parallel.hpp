#pragma once

#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace pelta {

/// Runs fn(0..n-1) across at most `workers` threads. Each index is handled
/// exactly once; callers own any cross-index aggregation, so results do not
/// depend on scheduling.
inline void parallel_for(std::size_t n, std::size_t workers,
                         const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  if (workers <= 1 || n == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t t = std::min(workers, n);
  std::vector<std::thread> pool;
  pool.reserve(t);
  for (std::size_t w = 0; w < t; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += t) fn(i);
    });
  }
  for (std::thread& th : pool) th.join();
}

}  // namespace pelta
