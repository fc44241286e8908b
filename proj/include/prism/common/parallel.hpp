#pragma once

#include <cstddef>
#include <functional>

namespace prism {

// Worker count for pure analytics: PRISM_VQ_THREADS when set (>= 1), else the
// hardware concurrency.
std::size_t worker_threads();

// Runs body(i) for i in [0, n) on up to worker_threads() threads. Each index
// is visited exactly once; callers write results into per-index slots so the
// outcome never depends on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace prism
