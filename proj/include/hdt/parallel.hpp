#pragma once

#include <cstddef>

namespace hdt {

/// Number of worker threads used by the kernels.
int thread_count();

/// Caps the kernel worker threads. Values below 1 are treated as 1.
void set_thread_count(int n);

/// Reads HDT_THREADS from the environment and applies it, if set.
void apply_thread_env();

/// Runs body(i) for i in [0, n). Every index is handled by exactly one
/// thread, so results do not depend on the thread count as long as body
/// only writes to storage owned by index i.
template <typename Body>
void parallel_for(std::size_t n, Body&& body) {
  const long count = static_cast<long>(n);
#pragma omp parallel for schedule(static) num_threads(thread_count()) if (count > 1)
  for (long i = 0; i < count; ++i) {
    body(static_cast<std::size_t>(i));
  }
}

}  // namespace hdt
