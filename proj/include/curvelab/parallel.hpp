#pragma once

#include <algorithm>
#include <functional>
#include <thread>
#include <vector>

namespace curvelab {

inline int& worker_count() {
  static int n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

inline void set_worker_count(int n) { worker_count() = std::max(1, n); }

// Splits [0, n) into contiguous chunks, one per worker. Chunk boundaries
// depend only on n and the worker count, and each invocation of fn owns its
// range exclusively, so results are deterministic for any thread count as
// long as fn writes disjoint outputs per index.
inline void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (n <= 0) return;
  int workers = std::min<std::int64_t>(worker_count(), n);
  if (workers <= 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::int64_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    std::int64_t lo = w * chunk;
    std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace curvelab
