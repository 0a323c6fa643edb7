#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace mvss {

/* Chunked parallel loop. Work is split into fixed-size chunks that do not
   depend on the worker count, so floating-point results are reproducible
   for any --threads setting as long as each chunk's output goes to a
   disjoint destination. */
inline void parallel_for_chunks(std::int64_t n, std::int64_t chunk, int threads,
                                const std::function<void(std::int64_t, std::int64_t)>& body) {
  if (chunk <= 0) chunk = 1;
  const std::int64_t n_chunks = (n + chunk - 1) / chunk;
  if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
  if (threads < 1) threads = 1;
  if (threads == 1 || n_chunks <= 1) {
    for (std::int64_t c = 0; c < n_chunks; ++c)
      body(c * chunk, std::min(n, (c + 1) * chunk));
    return;
  }
  std::atomic<std::int64_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&]() {
    for (;;) {
      const std::int64_t c = next.fetch_add(1);
      if (c >= n_chunks) return;
      try {
        body(c * chunk, std::min(n, (c + 1) * chunk));
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int workers = static_cast<int>(std::min<std::int64_t>(threads, n_chunks));
  pool.reserve(workers);
  for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace mvss
