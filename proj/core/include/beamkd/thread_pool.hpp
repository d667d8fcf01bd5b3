#pragma once

#include <cstddef>
#include <functional>

namespace beamkd {

// Worker-thread cap: BEAMKD_THREADS env var, else hardware concurrency.
int worker_threads();

// Runs fn(i) for i in [0, n). Results must land in per-index slots so the
// outcome is independent of scheduling. Runs inline when one thread suffices.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace beamkd
