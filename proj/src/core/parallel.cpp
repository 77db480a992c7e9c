#include "core/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

namespace colidr {

namespace {
std::atomic<int> g_workers{0};  // 0 = not set yet
}

void set_worker_count(int n) { g_workers.store(n < 1 ? 1 : n); }

int worker_count() {
  int n = g_workers.load();
  if (n > 0) return n;
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

std::size_t chunk_count(std::size_t n) {
  if (n == 0) return 0;
  std::size_t workers = static_cast<std::size_t>(worker_count());
  workers = std::min(workers, n);
  std::size_t chunk = (n + workers - 1) / workers;
  return (n + chunk - 1) / chunk;
}

void parallel_for_chunks(
    std::size_t n,
    const std::function<void(std::size_t, std::size_t, std::size_t)>& fn,
    std::size_t* n_chunks) {
  if (n == 0) {
    if (n_chunks) *n_chunks = 0;
    return;
  }
  std::size_t workers = static_cast<std::size_t>(worker_count());
  workers = std::min(workers, n);
  std::size_t chunk = (n + workers - 1) / workers;
  std::size_t chunks = (n + chunk - 1) / chunk;
  if (n_chunks) *n_chunks = chunks;
  if (chunks <= 1) {
    fn(0, 0, n);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(chunks);
  for (std::size_t w = 0; w < chunks; ++w) {
    std::size_t lo = w * chunk;
    std::size_t hi = std::min(n, lo + chunk);
    threads.emplace_back([&fn, w, lo, hi] { fn(w, lo, hi); });
  }
  for (auto& t : threads) t.join();
}

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
  parallel_for_chunks(
      n, [&fn](std::size_t, std::size_t lo, std::size_t hi) { fn(lo, hi); }, nullptr);
}

}  // namespace colidr
