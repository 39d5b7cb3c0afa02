#pragma once

#include <cstddef>
#include <functional>

namespace pfq {

// Caps intra-op parallelism. Results never depend on the thread count:
// work is split over independent items and every reduction runs in a fixed
// item order afterwards.
void set_num_threads(unsigned n);
unsigned num_threads();

// Calls fn(i) for i in [0, count), possibly from several threads.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

}  // namespace pfq
