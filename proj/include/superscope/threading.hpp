#pragma once

#include <cstdint>
#include <functional>

namespace superscope {

// Caps internal parallelism. n <= 0 restores the hardware default.
void set_max_threads(int n);
int max_threads();

// Runs body(begin, end) over disjoint chunks of [0, n). Chunk boundaries may
// move with the thread cap, but callers compute each output element with a
// fixed operation order, so results are identical for any thread count.
void parallel_for(int64_t n, int64_t grain,
                  const std::function<void(int64_t, int64_t)>& body);

} // namespace superscope
