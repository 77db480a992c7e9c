#pragma once

#include <cstddef>
#include <functional>

namespace colidr {

// Process-wide cap on worker threads used by parallel_for. Defaults to the
// hardware concurrency; the CLI overrides it via --workers.
void set_worker_count(int n);
int worker_count();

// Runs fn(begin, end) over a contiguous partition of [0, n). Every index is
// owned by exactly one worker, so writes to per-index outputs never race and
// results are bitwise identical for any worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

// Same partition, but hands each worker its chunk index so callers can keep
// per-chunk accumulators and reduce them in ascending chunk order afterwards.
// n_chunks is fixed before any thread starts.
void parallel_for_chunks(
    std::size_t n,
    const std::function<void(std::size_t chunk, std::size_t begin, std::size_t end)>& fn,
    std::size_t* n_chunks);

// Number of chunks parallel_for_chunks(n, ...) will use.
std::size_t chunk_count(std::size_t n);

}  // namespace colidr
