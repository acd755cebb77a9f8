#pragma once

#include <cstddef>
#include <functional>

namespace crp {

/// Worker count from CRP_WORKERS, else the hardware concurrency (at least 1).
std::size_t default_workers();

/// Calls fn(i) for i in [0, n) on up to `workers` threads. Work items are
/// claimed dynamically, so callers must write results by index. The first
/// exception thrown by any item is rethrown after all threads stop.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace crp
