#pragma once

#include <cstddef>
#include <functional>

namespace mxa {

// Worker count for intra-op loops. Read once from MXA_THREADS; 0 or 1 means
// sequential. Every parallel loop partitions disjoint outputs, so results are
// identical to the sequential order.
std::size_t intra_op_threads();
void set_intra_op_threads(std::size_t n);

// Calls body(begin, end) over a partition of [0, n). `grain` is the minimum
// amount of work per chunk before threads are used at all.
void parallel_for(std::size_t n, std::size_t work_per_item,
                  const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace mxa
