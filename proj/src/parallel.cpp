#include "transpose/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace transpose {

int worker_count() {
  static const int workers = [] {
    if (const char* env = std::getenv("TRANSPOSE_THREADS")) {
      int n = std::atoi(env);
      if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return workers;
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  const int workers = worker_count();
  // thread spawn is not worth it for small loops
  if (workers <= 1 || n < 4) {
    fn(0, n);
    return;
  }
  const int used = static_cast<int>(std::min<int64_t>(workers, n));
  const int64_t chunk = (n + used - 1) / used;
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(used) - 1);
  for (int t = 1; t < used; ++t) {
    int64_t begin = t * chunk;
    int64_t end = std::min<int64_t>(n, begin + chunk);
    if (begin >= end) break;
    threads.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  fn(0, std::min<int64_t>(n, chunk));
  for (auto& th : threads) th.join();
}

}  // namespace transpose
