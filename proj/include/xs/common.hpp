#ifndef XS_COMMON_HPP
#define XS_COMMON_HPP

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace xs {

// Error taxonomy. ShapeError/DimError/ConfigError/FormatError map to CLI
// exit code 1, NumericError to exit code 2.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Deterministic random number generation.
//
// std::mt19937_64 is portable, but the standard distributions are not; the
// transforms below are implemented by hand so that a given seed produces the
// same stream on every compiler.
// ---------------------------------------------------------------------------
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  uint64_t next_u64() {
    // xoshiro-style splitmix64 step; fast and full-period for our needs.
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t uniform_index(uint64_t n) {
    // Rejection-free modulo is fine here; n is tiny compared to 2^64.
    return next_u64() % n;
  }

  // Standard normal via Box-Muller. The spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Truncated normal restricted to [lo, hi] by rejection (exact; clipping
  // would pile mass at the bounds).
  double truncated_normal(double mean, double stddev, double lo, double hi) {
    for (;;) {
      double v = normal(mean, stddev);
      if (v >= lo && v <= hi) return v;
    }
  }

  // Derive an independent child stream, e.g. per pair or per iteration.
  Rng fork(uint64_t stream) const {
    Rng r(state_ ^ (0xd1342543de82ef95ull * (stream + 1)));
    r.next_u64();
    return r;
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Internal parallelism.
//
// parallel_for partitions [0, n) into fixed-size blocks processed by a small
// persistent pool. Kernels must only write disjoint outputs per index and
// keep per-output reduction order fixed, so results are independent of the
// worker count (bitwise). XS_THREADS=1 forces single-threaded execution.
// ---------------------------------------------------------------------------
namespace detail {

class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  int workers() const { return int(threads_.size()) + 1; }

  // fn(block_begin, block_end), blocks assigned dynamically.
  void run_blocks(int64_t n, int64_t block,
                  const std::function<void(int64_t, int64_t)>& fn) {
    std::unique_lock<std::mutex> lk(mu_);
    job_ = &fn;
    total_ = n;
    block_ = block;
    next_ = 0;
    active_ = int(threads_.size());
    ++epoch_;
    cv_start_.notify_all();
    lk.unlock();

    work_loop(fn);

    lk.lock();
    cv_done_.wait(lk, [&] { return active_ == 0; });
    job_ = nullptr;
  }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
      cv_start_.notify_all();
    }
    for (auto& t : threads_) t.join();
  }

 private:
  ThreadPool() {
    int n = 0;
    if (const char* env = std::getenv("XS_THREADS")) {
      n = std::atoi(env);
    }
    if (n <= 0) n = int(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    for (int i = 0; i < n - 1; ++i) {
      threads_.emplace_back([this] { worker(); });
    }
  }

  void worker() {
    uint64_t seen = 0;
    for (;;) {
      const std::function<void(int64_t, int64_t)>* fn = nullptr;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_start_.wait(lk, [&] { return stop_ || epoch_ != seen; });
        if (stop_) return;
        seen = epoch_;
        fn = job_;
      }
      if (fn) work_loop(*fn);
      {
        std::lock_guard<std::mutex> lk(mu_);
        if (--active_ == 0) cv_done_.notify_one();
      }
    }
  }

  void work_loop(const std::function<void(int64_t, int64_t)>& fn) {
    for (;;) {
      int64_t b = next_.fetch_add(block_);
      if (b >= total_) break;
      int64_t e = std::min(b + block_, total_);
      fn(b, e);
    }
  }

  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_start_;
  std::condition_variable cv_done_;
  const std::function<void(int64_t, int64_t)>* job_ = nullptr;
  std::atomic<int64_t> next_{0};
  int64_t total_ = 0;
  int64_t block_ = 0;
  uint64_t epoch_ = 0;
  int active_ = 0;
  bool stop_ = false;
};

}  // namespace detail

inline int num_threads() { return detail::ThreadPool::instance().workers(); }

template <typename Fn>
void parallel_for(int64_t n, Fn&& fn, int64_t min_block = 1) {
  if (n <= 0) return;
  auto& pool = detail::ThreadPool::instance();
  if (pool.workers() == 1 || n <= min_block) {
    fn(int64_t(0), n);
    return;
  }
  int64_t block = std::max<int64_t>(min_block, n / (4 * pool.workers()));
  std::function<void(int64_t, int64_t)> f = std::forward<Fn>(fn);
  pool.run_blocks(n, block, f);
}

inline bool debug_nan_checks() {
  static const bool on = [] {
    const char* env = std::getenv("XS_DEBUG_NAN");
    return env && env[0] && env[0] != '0';
  }();
  return on;
}

}  // namespace xs

#endif  // XS_COMMON_HPP
