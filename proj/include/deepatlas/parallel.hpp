#pragma once

#include <cstddef>
#include <functional>

namespace deepatlas {

/// Worker thread cap from DEEPATLAS_THREADS (default 1).
std::size_t worker_threads();

/// Runs fn(i) for i in [0, n) on up to worker_threads() threads. Callers
/// write results by index so the outcome does not depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace deepatlas
