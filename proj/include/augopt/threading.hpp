#pragma once

#include <algorithm>
#include <functional>
#include <thread>
#include <vector>

namespace augopt {

// Static-partition parallel loop. Each index is processed exactly once and
// workers never share output slots, so results are identical for any worker
// count; callers reduce in index order afterwards.
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    threads = std::max(1, std::min(threads, n));
    if (threads <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            for (int i = t; i < n; i += threads) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace augopt
