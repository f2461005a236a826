#pragma once

#include <cstddef>
#include <functional>

namespace ralnet {

// Process-wide execution settings for the numeric kernel.
//
// In deterministic mode work is split into chunks whose size does not depend
// on the thread count, and partial sums are combined in chunk order, so
// results are bitwise reproducible on any machine with the same build.
struct ExecConfig {
  bool deterministic = true;
  int threads = 0;  // 0 = hardware concurrency
};

ExecConfig& exec_config();
void set_deterministic(bool on);
void set_num_threads(int n);
int num_threads();

// Number of batch items per work chunk for a batch of `n` items.
int batch_chunk_size(int n);

// Runs fn(i) for i in [0, count) on the shared pool. Blocks until all done.
// fn must not throw across threads; exceptions are captured and the first one
// is rethrown on the calling thread.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

}  // namespace ralnet
