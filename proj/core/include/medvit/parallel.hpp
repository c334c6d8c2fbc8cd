#pragma once

#include <cstddef>
#include <functional>

namespace medvit {

/// Worker count used by parallel kernels. Defaults to MEDVIT_THREADS when set,
/// otherwise the number of hardware threads.
std::size_t thread_count();
void set_thread_count(std::size_t n);

/// Runs fn(i) for i in [begin, end) over a fixed contiguous partition.
/// Callers must make each index's work independent of every other index so the
/// result is bit-identical to the sequential loop.
void parallel_for(std::size_t begin, std::size_t end, const std::function<void(std::size_t)>& fn);

}  // namespace medvit
