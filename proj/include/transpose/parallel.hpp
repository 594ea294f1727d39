#pragma once

#include <cstdint>
#include <functional>

namespace transpose {

// Worker count: TRANSPOSE_THREADS if set, otherwise hardware concurrency.
int worker_count();

// Runs fn over disjoint [begin,end) chunks of [0,n). Callers must only
// write outputs indexed inside their chunk; under that rule results are
// identical for any worker count.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace transpose
