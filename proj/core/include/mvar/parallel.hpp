#pragma once

#include <functional>

namespace mvar {

// Worker cap: min(hardware threads, MVAR_THREADS if set). The deterministic
// flag (--deterministic) forces a single worker. All call sites hand out
// work items that write to disjoint buffers and reduce in index order, so
// results are identical at any worker count; the flag exists as a belt-and-
// braces guarantee.
int worker_count();
void force_single_worker(bool on);
bool single_worker_forced();

// Runs fn(0..n-1), possibly on several threads.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace mvar
