#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace regformer {

// Worker cap for data-parallel loops. REGFORMER_THREADS=1 selects the fully
// sequential test mode; unset falls back to hardware concurrency.
inline int thread_count() {
  if (const char* env = std::getenv("REGFORMER_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : int(hc);
}

// Runs fn(index, worker) for index in [0, n). Indices are dealt round-robin
// (index % workers), so the partition depends only on (n, workers) and each
// worker visits its indices in increasing order. fn must confine mutation to
// worker-owned state keyed by the worker id.
template <class Fn>
inline void parallel_for(size_t n, Fn&& fn, int max_workers = -1) {
  int w = max_workers > 0 ? max_workers : thread_count();
  w = int(std::min<size_t>(size_t(w), n == 0 ? 1 : n));
  if (w <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i, 0);
    return;
  }
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  threads.reserve(size_t(w));
  for (int t = 0; t < w; ++t) {
    threads.emplace_back([&, t] {
      try {
        for (size_t i = size_t(t); i < n; i += size_t(w)) fn(i, t);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace regformer
