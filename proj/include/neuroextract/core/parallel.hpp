#pragma once

#include <cstddef>
#include <functional>

namespace neuroextract {

/// Thread count from NEUROEXTRACT_THREADS, else hardware concurrency (>= 1).
int default_thread_count();

/// Runs body(i) for i in [0, n) on up to `threads` workers. Work items are
/// claimed dynamically, so bodies must write only to per-item outputs. The
/// first exception thrown by any body is rethrown after all workers join.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body);

}  // namespace neuroextract
