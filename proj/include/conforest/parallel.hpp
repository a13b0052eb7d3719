#pragma once

#include <functional>
#include <thread>
#include <vector>

#include "conforest/types.hpp"

namespace conforest {

// Static-partition parallel loop. Each index writes only its own slot, so the
// result is identical for any thread count.
inline void parallel_for(Index n, int n_threads,
                         const std::function<void(Index)>& body) {
  if (n_threads <= 1 || n < 2) {
    for (Index i = 0; i < n; ++i) body(i);
    return;
  }
  const int workers = static_cast<int>(
      std::min<Index>(n, static_cast<Index>(n_threads)));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([=, &body] {
      for (Index i = w; i < n; i += workers) body(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace conforest
