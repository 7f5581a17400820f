#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace mbsde {

namespace detail {
inline std::atomic<std::size_t>& thread_setting() {
  static std::atomic<std::size_t> value{1};
  return value;
}
}  // namespace detail

/// Number of worker threads used by the engines. Results never depend on it.
inline std::size_t thread_count() { return detail::thread_setting().load(); }

inline void set_thread_count(std::size_t n) {
  detail::thread_setting().store(std::max<std::size_t>(1, n));
}

/// Work is split into fixed-size chunks whose boundaries do not depend on
/// the thread count; reductions combine chunk partials in chunk order.
inline constexpr std::size_t kChunk = 4096;

/// Calls body(begin, end) over [0, n) in kChunk-sized pieces.
template <typename Body>
void parallel_chunks(std::size_t n, Body&& body) {
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  const std::size_t workers = std::min(thread_count(), chunks);
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) {
      body(c * kChunk, std::min(n, (c + 1) * kChunk));
    }
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&] {
    for (;;) {
      const std::size_t c = next.fetch_add(1);
      if (c >= chunks) return;
      try {
        body(c * kChunk, std::min(n, (c + 1) * kChunk));
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

template <typename Body>
void parallel_for(std::size_t n, Body&& body) {
  parallel_chunks(n, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) body(i);
  });
}

/// Sum of term(i) over [0, n) with a thread-count independent result.
template <typename Term>
double deterministic_sum(std::size_t n, Term&& term) {
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  std::vector<double> partial(chunks, 0.0);
  parallel_chunks(n, [&](std::size_t b, std::size_t e) {
    double s = 0.0;
    for (std::size_t i = b; i < e; ++i) s += term(i);
    partial[b / kChunk] = s;
  });
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

}  // namespace mbsde
