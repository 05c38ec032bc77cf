#include "superscope/threading.hpp"

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

namespace superscope {

static std::atomic<int> g_max_threads{0};

void set_max_threads(int n) {
    g_max_threads.store(n > 0 ? n : 0);
}

int max_threads() {
    int n = g_max_threads.load();
    if (n > 0) {
        return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : (int) hw;
}

void parallel_for(int64_t n, int64_t grain,
                  const std::function<void(int64_t, int64_t)>& body) {
    if (n <= 0) {
        return;
    }
    if (grain < 1) {
        grain = 1;
    }
    int64_t want = (n + grain - 1) / grain;
    int64_t nthread = std::min<int64_t>(want, max_threads());
    if (nthread <= 1) {
        body(0, n);
        return;
    }
    int64_t chunk = (n + nthread - 1) / nthread;
    std::vector<std::thread> pool;
    pool.reserve((size_t) nthread - 1);
    for (int64_t t = 1; t < nthread; t++) {
        int64_t begin = t * chunk;
        int64_t end = std::min(n, begin + chunk);
        if (begin >= end) {
            break;
        }
        pool.emplace_back([&body, begin, end] { body(begin, end); });
    }
    body(0, std::min(n, chunk));
    for (auto& th : pool) {
        th.join();
    }
}

} // namespace superscope
