#pragma once

#include <atomic>
#include <cstdint>

namespace mvar::opcount {

// Global multiply-accumulate counter used by the cost instrumentation.
// Attention kernels count score (Q.K^T) and mix (P.V) MACs only -- the
// projections are excluded so the count matches the analytic score-matrix
// model. The scan kernel counts its full per-step work, which is constant
// per step. Increments happen at row/step granularity, so keeping the
// counter always on does not perturb kernel timing.
inline std::atomic<uint64_t> macs{0};

inline void add(uint64_t n) { macs.fetch_add(n, std::memory_order_relaxed); }
inline void reset() { macs.store(0, std::memory_order_relaxed); }
inline uint64_t get() { return macs.load(std::memory_order_relaxed); }

}  // namespace mvar::opcount
