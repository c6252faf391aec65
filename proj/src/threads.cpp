#include "fmkit/threads.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace fmkit {

namespace {

int g_cap_override = 0;
thread_local bool tl_in_parallel = false;

int env_threads() {
  if (const char* s = std::getenv("FMKIT_THREADS")) {
    int v = std::atoi(s);
    if (v >= 1) return v;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace

int thread_cap() { return g_cap_override > 0 ? g_cap_override : env_threads(); }

void set_thread_cap(int n) { g_cap_override = n > 0 ? n : 0; }

void parallel_for(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  int cap = thread_cap();
  if (cap <= 1 || tl_in_parallel || n < 2 * grain) {
    fn(0, n);
    return;
  }
  int nthreads = static_cast<int>(std::min<int64_t>(cap, (n + grain - 1) / grain));
  int64_t chunk = (n + nthreads - 1) / nthreads;
  std::vector<std::thread> pool;
  pool.reserve(nthreads);
  for (int t = 0; t < nthreads; ++t) {
    int64_t lo = t * chunk;
    int64_t hi = std::min<int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] {
      tl_in_parallel = true;
      fn(lo, hi);
      tl_in_parallel = false;
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace fmkit
