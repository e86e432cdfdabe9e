#pragma once

#include <cstddef>
#include <functional>

namespace sinsemi {

/// Worker count: SINSEMI_THREADS when set to a positive integer, else the
/// hardware concurrency (at least 1).
int worker_count();

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Indices are
/// dealt out statically, so any fn that writes only its own slot gives the
/// same result for every thread count. The first exception is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace sinsemi
