#pragma once

#include <cstdint>
#include <functional>

namespace fmkit {

// Kernel-level parallelism cap. Resolution order: explicit set_thread_cap()
// (the CLI's --deterministic forces 1), then FMKIT_THREADS, then hardware
// concurrency. Work is split into disjoint index ranges so results are
// bit-identical for any thread count.
int thread_cap();
void set_thread_cap(int n);  // n <= 0 restores the environment default

// Runs fn(begin, end) over a partition of [0, n). Serial when the cap is 1,
// the range is small, or we are already inside a parallel region.
void parallel_for(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace fmkit
