#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <vector>

namespace mvsdf {

// Runs fn(begin, end) over disjoint chunks of [0, n). Chunks are claimed from
// an atomic counter by a small worker pool; outputs stay deterministic as long
// as fn writes only to its own range. Falls back to the calling thread when a
// single chunk (or core) is all there is.
inline void parallel_for(long n, long grain, const std::function<void(long, long)>& fn) {
  if (n <= 0) return;
  if (grain < 1) throw std::runtime_error("parallel_for: grain must be positive");
  const long chunks = (n + grain - 1) / grain;
  unsigned hw = std::thread::hardware_concurrency();
  long workers = std::min<long>(chunks, hw == 0 ? 1 : static_cast<long>(hw));
  if (workers <= 1) {
    for (long start = 0; start < n; start += grain) fn(start, std::min(n, start + grain));
    return;
  }
  std::atomic<long> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    while (true) {
      long c = next.fetch_add(1);
      if (c >= chunks || failed.load()) return;
      long start = c * grain;
      try {
        fn(start, std::min(n, start + grain));
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        failed.store(true);
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (long i = 1; i < workers; ++i) pool.emplace_back(work);
  work();
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace mvsdf
