#pragma once

#include <cstddef>
#include <functional>

namespace brtf {

/// Worker count used by parallel loops. Defaults to BRTF_THREADS from the
/// environment (0 or unset = hardware concurrency).
std::size_t worker_count();
void set_worker_count(std::size_t workers);

/// Runs body(begin, end) over contiguous chunks of [0, count). Chunk
/// boundaries depend only on `count` and the worker count, and every index is
/// handled by exactly one call, so per-index results are reproducible.
void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace brtf
