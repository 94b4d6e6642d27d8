#include "mxa/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace mxa {

namespace {

std::size_t threads_from_env() {
  const char* env = std::getenv("MXA_THREADS");
  if (!env || !*env) return 0;
  try {
    return static_cast<std::size_t>(std::stoul(env));
  } catch (...) {
    return 0;
  }
}

std::atomic<std::size_t>& thread_setting() {
  static std::atomic<std::size_t> value{threads_from_env()};
  return value;
}

constexpr std::size_t kMinParallelWork = 1 << 16;

}  // namespace

std::size_t intra_op_threads() { return thread_setting().load(); }
void set_intra_op_threads(std::size_t n) { thread_setting().store(n); }

void parallel_for(std::size_t n, std::size_t work_per_item,
                  const std::function<void(std::size_t, std::size_t)>& body) {
  const std::size_t threads = std::min(intra_op_threads(), n);
  if (threads <= 1 || n * work_per_item < kMinParallelWork) {
    if (n) body(0, n);
    return;
  }
  std::vector<std::jthread> workers;
  workers.reserve(threads - 1);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 1; t < threads; ++t) {
    const std::size_t begin = t * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    workers.emplace_back([&body, begin, end] { body(begin, end); });
  }
  body(0, std::min(n, chunk));
}

}  // namespace mxa
