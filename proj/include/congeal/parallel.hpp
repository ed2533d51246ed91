#pragma once

#include <functional>

namespace congeal {

// Worker count: CONGEAL_THREADS when set to a positive integer, otherwise the
// number of hardware threads.
int worker_count();

// Calls fn(i) for i in [0, n) on up to worker_count() threads. Indices are
// split into contiguous chunks; the first exception is rethrown after all
// workers finish.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace congeal
