#pragma once

#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <thread>
#include <typeindex>
#include <vector>

namespace ngm {

inline int default_worker_count() {
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

// One-shot parallel loop for read-only work (rendering, meshing). Each index
// runs exactly once; items must be independent.
inline void parallel_for(std::size_t n, int workers,
                         const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  if (workers <= 1 || n == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::size_t nthreads =
      std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(nthreads);
  for (std::size_t w = 0; w < nthreads; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i = next.fetch_add(1, std::memory_order_relaxed);
        if (i >= n) return;
        fn(i);
      }
    });
  }
  for (auto& t : pool) t.join();
}

// Persistent pool with stable worker ids and per-worker scratch storage, so
// the training loop can reuse its (large) gradient buffers across frames.
// The calling thread participates as worker 0.
class WorkerPool {
 public:
  explicit WorkerPool(int workers)
      : workers_(workers < 1 ? 1 : workers), scratch_(workers_) {
    for (int w = 1; w < workers_; ++w)
      threads_.emplace_back([this, w] { worker_loop(w); });
  }

  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  ~WorkerPool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  int size() const { return workers_; }

  void run(std::size_t n, const std::function<void(std::size_t, int)>& fn) {
    if (n == 0) return;
    if (workers_ == 1) {
      for (std::size_t i = 0; i < n; ++i) fn(i, 0);
      return;
    }
    {
      std::lock_guard<std::mutex> lk(mu_);
      job_fn_ = &fn;
      job_n_ = n;
      next_.store(0);
      done_.store(0);
      ++generation_;
    }
    cv_.notify_all();
    work(&fn, n, 0);
    {
      std::unique_lock<std::mutex> lk(mu_);
      done_cv_.wait(lk, [&] { return done_.load() == job_n_; });
      job_fn_ = nullptr;
      if (exception_) {
        auto e = exception_;
        exception_ = nullptr;
        std::rethrow_exception(e);
      }
    }
  }

  // Lazily constructed per-worker scratch object of type T.
  template <typename T>
  T& workspace(int worker) {
    auto& slot = scratch_[worker][std::type_index(typeid(T))];
    if (!slot) slot = std::shared_ptr<void>(new T(), [](void* p) {
      delete static_cast<T*>(p);
    });
    return *static_cast<T*>(slot.get());
  }

 private:
  void worker_loop(int w) {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(std::size_t, int)>* fn = nullptr;
      std::size_t n = 0;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        fn = job_fn_;
        n = job_n_;
      }
      if (fn) work(fn, n, w);
    }
  }

  void work(const std::function<void(std::size_t, int)>* fn, std::size_t n,
            int w) {
    for (;;) {
      std::size_t i = next_.fetch_add(1, std::memory_order_relaxed);
      if (i >= n) return;
      try {
        (*fn)(i, w);
      } catch (...) {
        std::lock_guard<std::mutex> lk(mu_);
        if (!exception_) exception_ = std::current_exception();
      }
      if (done_.fetch_add(1) + 1 == n) {
        std::lock_guard<std::mutex> lk(mu_);
        done_cv_.notify_all();
      }
    }
  }

  int workers_;
  std::vector<std::thread> threads_;
  std::vector<std::map<std::type_index, std::shared_ptr<void>>> scratch_;

  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  bool stop_ = false;
  std::uint64_t generation_ = 0;
  const std::function<void(std::size_t, int)>* job_fn_ = nullptr;
  std::size_t job_n_ = 0;
  std::atomic<std::size_t> next_{0};
  std::atomic<std::size_t> done_{0};
  std::exception_ptr exception_;
};

}  // namespace ngm
