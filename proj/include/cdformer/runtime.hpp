/*
 * Copyright (c) 2026 The cdformer Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

// Process-wide execution switches: strict-sequential mode, numeric
// validation, gradient recording, and allocation statistics.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cdformer {

namespace detail {

inline bool env_flag(const char* name) {
  const char* v = std::getenv(name);
  return v != nullptr && std::strcmp(v, "") != 0 && std::strcmp(v, "0") != 0;
}

inline std::atomic<int>& strict_state() {
  // -1 = not yet read from the environment
  static std::atomic<int> state{-1};
  return state;
}

inline std::atomic<bool>& validate_state() {
  static std::atomic<bool> state{env_flag("CDF_VALIDATE")};
  return state;
}

inline bool& grad_enabled_ref() {
  thread_local bool enabled = true;
  return enabled;
}

struct AllocStats {
  std::atomic<std::size_t> peak_single{0};
  std::atomic<std::size_t> count{0};
};

inline AllocStats& alloc_stats() {
  static AllocStats stats;
  return stats;
}

/// splitmix64 finalizer over (seed, index); derives independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Strict-sequential mode: all kernels run on the calling thread.
/// Initialized from CDF_STRICT=1; can be overridden programmatically.
inline bool strict_mode() {
  int s = detail::strict_state().load();
  if (s < 0) {
    s = detail::env_flag("CDF_STRICT") ? 1 : 0;
    detail::strict_state().store(s);
  }
  return s == 1;
}

inline void set_strict_mode(bool on) { detail::strict_state().store(on ? 1 : 0); }

/// When on, every recorded operation checks its output for NaN/Inf.
inline bool validation_mode() { return detail::validate_state().load(); }
inline void set_validation_mode(bool on) { detail::validate_state().store(on); }

inline bool grad_enabled() { return detail::grad_enabled_ref(); }

/// Disables tape recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_ref()) { detail::grad_enabled_ref() = false; }
  ~NoGradGuard() { detail::grad_enabled_ref() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class StrictModeGuard {
 public:
  explicit StrictModeGuard(bool on = true) : prev_(strict_mode()) { set_strict_mode(on); }
  ~StrictModeGuard() { set_strict_mode(prev_); }
  StrictModeGuard(const StrictModeGuard&) = delete;
  StrictModeGuard& operator=(const StrictModeGuard&) = delete;

 private:
  bool prev_;
};

inline void record_allocation(std::size_t bytes) {
  auto& s = detail::alloc_stats();
  s.count.fetch_add(1, std::memory_order_relaxed);
  std::size_t cur = s.peak_single.load(std::memory_order_relaxed);
  while (bytes > cur && !s.peak_single.compare_exchange_weak(cur, bytes)) {
  }
}

inline void reset_allocation_stats() {
  detail::alloc_stats().peak_single.store(0);
  detail::alloc_stats().count.store(0);
}

/// Largest single tensor buffer allocated since the last reset.
inline std::size_t peak_allocation_bytes() { return detail::alloc_stats().peak_single.load(); }

inline std::size_t worker_count() {
  if (strict_mode()) return 1;
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs fn(begin, end) over disjoint chunks of [0, n). Chunks write disjoint
/// outputs, so results do not depend on the worker count.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t min_chunk, Fn&& fn) {
  const std::size_t workers = std::min(worker_count(), (n + min_chunk - 1) / std::max<std::size_t>(1, min_chunk));
  if (workers <= 1) {
    if (n) fn(std::size_t{0}, n);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t b = w * chunk;
    const std::size_t e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::size_t{0}, std::min(n, chunk));
  for (auto& t : pool) t.join();
}

/// Keeps freed tensor buffers in the process heap instead of returning them
/// to the kernel, so repeated large allocations stop paying page faults.
/// Process-wide; a no-op outside glibc. Call once at program start.
inline void retain_freed_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace cdformer
