#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace sonofield {

/// Runs fn(worker, chunk) for chunk in [0, chunks), chunk c going to worker
/// c % threads. The first exception thrown by any worker is rethrown.
template <typename Fn>
void parallel_chunks(std::size_t chunks, int threads, Fn&& fn) {
  const std::size_t workers = std::clamp<std::size_t>(threads < 1 ? 1 : threads, 1, std::max<std::size_t>(chunks, 1));
  if (workers == 1) {
    for (std::size_t c = 0; c < chunks; ++c) fn(0, c);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t c = w; c < chunks; c += workers) fn(w, c);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace sonofield
