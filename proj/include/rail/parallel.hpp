#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace rail {

// Work-sharing helper for the hot tensor kernels. Every parallel_for body
// owns a disjoint index range and performs its own reductions in a fixed
// serial order, so results are bitwise identical for any worker count.
class ThreadPool {
 public:
  static ThreadPool& instance();

  // n == 1 disables the workers entirely. Safe to call between parallel
  // regions only.
  void set_threads(int n);
  int threads() const { return n_threads_; }

  // Runs fn(begin, end) over a static partition of [0, count). Nested or
  // concurrent calls fall back to inline execution on the calling thread.
  void parallel_for(std::int64_t count,
                    const std::function<void(std::int64_t, std::int64_t)>& fn);

  ~ThreadPool();

 private:
  ThreadPool() = default;
  void start_workers(int n);
  void stop_workers();
  void worker_loop(int worker_id);

  int n_threads_ = 1;
  std::vector<std::thread> workers_;
  std::mutex m_;
  std::condition_variable cv_work_;
  std::condition_variable cv_done_;
  std::uint64_t generation_ = 0;
  int pending_ = 0;
  bool stopping_ = false;
  const std::function<void(std::int64_t, std::int64_t)>* job_ = nullptr;
  std::int64_t job_count_ = 0;
  int job_parts_ = 0;
  std::mutex region_m_;
};

void set_threads(int n);
int threads();

void parallel_for(std::int64_t count,
                  const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace rail
