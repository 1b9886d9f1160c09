#ifndef TILENS_PARALLEL_HPP
#define TILENS_PARALLEL_HPP

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace tilens {

// Worker count: TILENS_THREADS if set, else hardware concurrency.
inline int thread_count() {
  if (const char* s = std::getenv("TILENS_THREADS")) {
    const int n = std::atoi(s);
    if (n > 0) return n;
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc ? static_cast<int>(hc) : 1;
}

// Contiguous-chunk parallel loop over [0, n).  Each index is processed
// exactly once and results must be written by index, so output is identical
// regardless of the worker count.  The first exception thrown by any worker
// is rethrown on the calling thread.
inline void parallel_for(long n, const std::function<void(long)>& body) {
  const long nt = std::min<long>(thread_count(), n);
  if (nt <= 1) {
    for (long i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr first_error = nullptr;
  std::mutex err_mu;
  const long chunk = (n + nt - 1) / nt;
  for (long w = 0; w < nt; ++w) {
    const long lo = w * chunk;
    const long hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&, lo, hi] {
      try {
        for (long i = lo; i < hi; ++i) body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace tilens

#endif
