#pragma once

#include <cstdint>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace oss {

/// Resolve a thread-count request: 0 means "use the hardware".
inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Static contiguous partition of [0, n) over `threads` workers.
/// fn(begin, end, tid) runs once per worker. The partition depends only on
/// (n, threads), never on timing, so any per-slot output is deterministic;
/// cross-slot reductions must be done by the caller in slot order. An
/// exception thrown by a worker is rethrown here (lowest slot wins) after
/// every worker has finished.
inline void parallel_for(int64_t n, int threads,
                         const std::function<void(int64_t, int64_t, int)>& fn) {
    threads = resolve_threads(threads);
    if (n <= 0) return;
    if (threads <= 1 || n == 1) {
        fn(0, n, 0);
        return;
    }
    if (static_cast<int64_t>(threads) > n) threads = static_cast<int>(n);
    const int64_t chunk = (n + threads - 1) / threads;
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(threads));
    pool.reserve(static_cast<size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        const int64_t begin = t * chunk;
        const int64_t end = std::min<int64_t>(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&fn, &errors, begin, end, t] {
            try {
                fn(begin, end, t);
            } catch (...) {
                errors[static_cast<size_t>(t)] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (const std::exception_ptr& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace oss
