#pragma once

#include <cstdint>
#include <functional>

namespace vfamc {

// Number of worker threads, capped by VFA_MOTION_THREADS when set.
int max_threads();

// Runs body(i) for i in [begin, end). Work is split into contiguous blocks; each
// index is visited exactly once, so per-index writes give deterministic output.
void parallel_for(std::int64_t begin, std::int64_t end, const std::function<void(std::int64_t)>& body);

}  // namespace vfamc
