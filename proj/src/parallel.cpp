#include "rail/parallel.hpp"

#include <algorithm>
#include <atomic>

namespace rail {

namespace {
thread_local bool t_inside_pool = false;
}

ThreadPool& ThreadPool::instance() {
  static ThreadPool pool;
  return pool;
}

ThreadPool::~ThreadPool() { stop_workers(); }

void ThreadPool::set_threads(int n) {
  n = std::max(1, n);
  if (n == n_threads_) return;
  stop_workers();
  n_threads_ = n;
  if (n > 1) start_workers(n - 1);  // caller participates as one worker
}

void ThreadPool::start_workers(int n) {
  stopping_ = false;
  for (int i = 0; i < n; ++i) {
    workers_.emplace_back([this, i] { worker_loop(i); });
  }
}

void ThreadPool::stop_workers() {
  {
    std::lock_guard<std::mutex> lk(m_);
    stopping_ = true;
  }
  cv_work_.notify_all();
  for (auto& w : workers_) w.join();
  workers_.clear();
}

void ThreadPool::worker_loop(int worker_id) {
  t_inside_pool = true;
  std::uint64_t seen = 0;
  for (;;) {
    const std::function<void(std::int64_t, std::int64_t)>* job;
    std::int64_t count;
    int parts;
    {
      std::unique_lock<std::mutex> lk(m_);
      cv_work_.wait(lk, [&] { return stopping_ || generation_ != seen; });
      if (stopping_) return;
      seen = generation_;
      job = job_;
      count = job_count_;
      parts = job_parts_;
    }
    const int part = worker_id + 1;  // part 0 runs on the calling thread
    const std::int64_t chunk = (count + parts - 1) / parts;
    const std::int64_t begin = std::min<std::int64_t>(count, part * chunk);
    const std::int64_t end = std::min<std::int64_t>(count, begin + chunk);
    if (begin < end) (*job)(begin, end);
    {
      std::lock_guard<std::mutex> lk(m_);
      if (--pending_ == 0) cv_done_.notify_all();
    }
  }
}

void ThreadPool::parallel_for(
    std::int64_t count,
    const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (count <= 0) return;
  const int parts = std::min<std::int64_t>(n_threads_, count);
  if (parts <= 1 || t_inside_pool) {
    fn(0, count);
    return;
  }
  std::unique_lock<std::mutex> region(region_m_, std::try_to_lock);
  if (!region.owns_lock()) {  // another region is active; run inline
    fn(0, count);
    return;
  }
  {
    std::lock_guard<std::mutex> lk(m_);
    job_ = &fn;
    job_count_ = count;
    job_parts_ = parts;
    pending_ = static_cast<int>(workers_.size());
    ++generation_;
  }
  cv_work_.notify_all();
  const std::int64_t chunk = (count + parts - 1) / parts;
  fn(0, std::min<std::int64_t>(count, chunk));
  std::unique_lock<std::mutex> lk(m_);
  cv_done_.wait(lk, [&] { return pending_ == 0; });
  job_ = nullptr;
}

void set_threads(int n) { ThreadPool::instance().set_threads(n); }
int threads() { return ThreadPool::instance().threads(); }

void parallel_for(std::int64_t count,
                  const std::function<void(std::int64_t, std::int64_t)>& fn) {
  ThreadPool::instance().parallel_for(count, fn);
}

}  // namespace rail
