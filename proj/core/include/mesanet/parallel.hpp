#pragma once

#include <cstddef>
#include <functional>

namespace mesanet {

// Worker count: MESA_THREADS if set and positive, else the hardware count.
std::size_t worker_count();

// Runs fn(i) for i in [0, n). Each index must write only its own outputs; the
// result is then independent of scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace mesanet
