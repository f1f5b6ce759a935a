#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace layerseg {

// Runs fn(i) for i in [0, count) on up to `threads` threads with a static
// contiguous split. If several calls throw, the one with the lowest index is
// rethrown so failures do not depend on scheduling.
template <class Fn>
void parallel_for(std::ptrdiff_t count, int threads, Fn&& fn) {
  if (count <= 0) return;
  const std::ptrdiff_t workers = std::clamp<std::ptrdiff_t>(threads, 1, count);
  if (workers == 1) {
    for (std::ptrdiff_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (std::ptrdiff_t w = 0; w < workers; ++w) {
    const std::ptrdiff_t begin = count * w / workers;
    const std::ptrdiff_t end = count * (w + 1) / workers;
    pool.emplace_back([&, w, begin, end] {
      for (std::ptrdiff_t i = begin; i < end; ++i) {
        try {
          fn(i);
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  // chunks are ordered, so the first failing chunk holds the lowest index
  for (std::size_t w = 0; w < errors.size(); ++w) {
    if (errors[w]) std::rethrow_exception(errors[w]);
  }
}

}  // namespace layerseg
