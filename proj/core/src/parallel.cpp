#include "mvar/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace mvar {

static std::atomic<bool> g_single{false};

static int env_cap() {
  const char* s = std::getenv("MVAR_THREADS");
  if (!s) return 1 << 30;
  int n = std::atoi(s);
  return n >= 1 ? n : 1;
}

int worker_count() {
  if (g_single.load(std::memory_order_relaxed)) return 1;
  int hw = (int)std::thread::hardware_concurrency();
  if (hw < 1) hw = 1;
  return std::min(hw, env_cap());
}

void force_single_worker(bool on) { g_single.store(on, std::memory_order_relaxed); }

bool single_worker_forced() { return g_single.load(std::memory_order_relaxed); }

void parallel_for(int n, const std::function<void(int)>& fn) {
  int workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        int i = next.fetch_add(1, std::memory_order_relaxed);
        if (i >= n) return;
        fn(i);
      }
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace mvar
