#pragma once

#include <algorithm>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace octfield {

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

// Fork-join over [0,n) in static contiguous blocks. The block boundaries
// depend only on (n, threads), and callers write to disjoint slots, so the
// computed values are identical for any thread count; only wall time changes.
inline void parallel_for(int64_t n, int threads,
                         const std::function<void(int64_t, int64_t)>& body) {
  if (n <= 0) return;
  int t = static_cast<int>(std::min<int64_t>(std::max(1, threads), n));
  if (t == 1) {
    body(0, n);
    return;
  }
  int64_t chunk = (n + t - 1) / t;
  std::vector<std::thread> workers;
  std::exception_ptr error;
  std::mutex error_mutex;
  for (int i = 0; i < t; ++i) {
    int64_t lo = i * chunk;
    int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    workers.emplace_back([&, lo, hi] {
      try {
        body(lo, hi);
      } catch (...) {
        std::lock_guard<std::mutex> g(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace octfield
