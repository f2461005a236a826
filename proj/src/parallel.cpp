#include "ralnet/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <exception>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace ralnet {

namespace {

constexpr int kDeterministicChunk = 8;

class ThreadPool {
 public:
  explicit ThreadPool(int workers) {
    for (int i = 0; i < workers; ++i) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }
  ~ThreadPool() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  int size() const { return static_cast<int>(threads_.size()); }

  void run(std::size_t count, const std::function<void(std::size_t)>& fn) {
    std::unique_lock lock(mu_);
    job_ = &fn;
    job_count_ = count;
    next_.store(0);
    pending_ = threads_.size();
    error_ = nullptr;
    ++generation_;
    cv_.notify_all();
    lock.unlock();
    drain();
    lock.lock();
    done_cv_.wait(lock, [this] { return pending_ == 0; });
    job_ = nullptr;
    if (error_) std::rethrow_exception(error_);
  }

 private:
  void drain() {
    for (;;) {
      const std::size_t i = next_.fetch_add(1);
      if (i >= job_count_) return;
      try {
        (*job_)(i);
      } catch (...) {
        std::lock_guard lock(mu_);
        if (!error_) error_ = std::current_exception();
      }
    }
  }

  void worker_loop() {
    std::size_t seen = 0;
    for (;;) {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      lock.unlock();
      drain();
      lock.lock();
      if (--pending_ == 0) done_cv_.notify_all();
    }
  }

  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  const std::function<void(std::size_t)>* job_ = nullptr;
  std::size_t job_count_ = 0;
  std::atomic<std::size_t> next_{0};
  std::size_t pending_ = 0;
  std::size_t generation_ = 0;
  bool stop_ = false;
  std::exception_ptr error_;
};

std::mutex g_pool_mu;
std::unique_ptr<ThreadPool> g_pool;

ThreadPool* pool() {
  std::lock_guard lock(g_pool_mu);
  const int want = num_threads() - 1;  // caller thread participates
  if (want <= 0) return nullptr;
  if (!g_pool || g_pool->size() != want) g_pool = std::make_unique<ThreadPool>(want);
  return g_pool.get();
}

}  // namespace

ExecConfig& exec_config() {
  static ExecConfig cfg;
  return cfg;
}

void set_deterministic(bool on) { exec_config().deterministic = on; }

void set_num_threads(int n) { exec_config().threads = std::max(0, n); }

int num_threads() {
  const int t = exec_config().threads;
  if (t > 0) return t;
  return std::max(1u, std::thread::hardware_concurrency());
}

int batch_chunk_size(int n) {
  if (exec_config().deterministic) return kDeterministicChunk;
  const int t = num_threads();
  return std::max(1, (n + t - 1) / t);
}

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
  if (count == 0) return;
  ThreadPool* p = count > 1 ? pool() : nullptr;
  if (!p) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  p->run(count, fn);
}

}  // namespace ralnet
