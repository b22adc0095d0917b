#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace quadfit {

/// Runs fn(chunk_index, begin, end) over a fixed partition of [0, n).
/// The partition depends only on n and n_chunks, never on n_threads, so
/// per-chunk accumulators merged in chunk order give thread-count-invariant
/// results.
inline void parallel_chunks(std::size_t n, std::size_t n_chunks, int n_threads,
                            const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
  if (n == 0) return;
  n_chunks = std::max<std::size_t>(1, std::min(n_chunks, n));
  const std::size_t per = (n + n_chunks - 1) / n_chunks;
  if (n_threads <= 1 || n_chunks == 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) {
      const std::size_t b = c * per;
      if (b >= n) break;
      fn(c, b, std::min(n, b + per));
    }
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<std::size_t> next{0};
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(n_threads), n_chunks);
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (;;) {
        const std::size_t c = next.fetch_add(1);
        if (c >= n_chunks) return;
        const std::size_t b = c * per;
        if (b >= n) return;
        fn(c, b, std::min(n, b + per));
      }
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace quadfit
