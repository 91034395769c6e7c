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

// Attention cost versus point count.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdformer/attention.hpp"
#include "cdformer/geometry.hpp"
#include "cdformer/params.hpp"
#include "cdformer/runtime.hpp"

namespace cdformer {

enum class BenchKernel { kLsa, kCollect, kDistribute, kFullAttention };

inline const char* to_string(BenchKernel k) {
  switch (k) {
    case BenchKernel::kLsa: return "lsa";
    case BenchKernel::kCollect: return "collect";
    case BenchKernel::kDistribute: return "distribute";
    case BenchKernel::kFullAttention: return "full_attention";
  }
  return "?";
}

inline BenchKernel bench_kernel_from_string(const std::string& s) {
  if (s == "lsa") return BenchKernel::kLsa;
  if (s == "collect") return BenchKernel::kCollect;
  if (s == "distribute") return BenchKernel::kDistribute;
  if (s == "full_attention") return BenchKernel::kFullAttention;
  throw ConfigError("unknown bench kernel '" + s + "' (expected lsa, collect, distribute or full_attention)");
}

struct BenchResult {
  std::string kernel;
  std::size_t n = 0;
  std::size_t k = 0;
  std::size_t s = 0;
  std::size_t repeats = 0;
  double median_s = 0.0;
  std::size_t mem_bytes = 0;
};

struct BenchOptions {
  std::size_t k = 16;
  std::size_t s = 8;
  std::size_t repeats = 5;
  std::size_t channels = 32;
  std::size_t heads = 4;
  std::uint64_t seed = 0;
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// Times one forward of `kernel` per N. Patch division and neighbor lists are
/// built before the clock starts, so only attention itself is measured.
/// Runs in strict mode (single worker) for the duration of the call.
inline std::vector<BenchResult> run_scaling(BenchKernel kernel, const std::vector<std::size_t>& ns, const BenchOptions& opt = {}) {
  if (opt.repeats < 5) throw ContractError("run_scaling: repeats must be >= 5");
  if (!std::is_sorted(ns.begin(), ns.end())) throw ContractError("run_scaling: Ns must be ascending");
  StrictModeGuard strict(true);
  NoGradGuard ng;
  ParameterStore<float> store(opt.seed);
  const AttentionLayer<float> layer = store.attention("bench", opt.channels, opt.heads);
  std::vector<BenchResult> out;
  for (std::size_t n : ns) {
    if (n < opt.k * opt.s) throw ContractError("run_scaling: N=" + std::to_string(n) + " too small for K*S");
    std::mt19937_64 rng(detail::mix_seed(opt.seed, n));
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    std::normal_distribution<float> g(0.0f, 1.0f);
    std::vector<float> xyz(n * 3), f(n * opt.channels);
    for (auto& v : xyz) v = u(rng);
    for (auto& v : f) v = g(rng);
    const Tensor<float> coords({n, 3}, std::move(xyz)), feats({n, opt.channels}, std::move(f));

    std::function<Tensor<float>()> run;
    if (kernel == BenchKernel::kFullAttention) {
      run = [&] { return full_self_attention(feats, layer.attn); };
    } else {
      const PatchIndex patch = patch_divide(coords, opt.s, opt.k);
      const Tensor<float> patch_feats = reshape(gather_rows(feats, patch.neighbor_idx), Shape{patch.num_patches(), opt.k, opt.channels});
      const Tensor<float> proxy_coords = select_rows(coords, patch.center_idx);
      if (kernel == BenchKernel::kLsa) {
        const Tensor<float> dp = patch_offsets(coords, patch);
        run = [&layer, patch_feats, dp] { return local_self_attention(patch_feats, dp, layer); };
      } else if (kernel == BenchKernel::kCollect) {
        const Neighborhood<float> nb = make_neighborhood(proxy_coords, proxy_coords, opt.k);
        run = [&layer, patch_feats, nb] {
          const Tensor<float> proxies = reduce_max_axis(patch_feats);
          return attend_neighbors(proxies, proxies, nb, layer);
        };
      } else {
        const Tensor<float> proxies = reduce_max_axis(patch_feats);
        const Neighborhood<float> nb = make_neighborhood(coords, proxy_coords, opt.k);
        run = [&layer, &feats, proxies, nb] { return attend_neighbors(feats, proxies, nb, layer); };
      }
    }
    run();  // warm-up
    reset_allocation_stats();
    std::vector<double> times;
    for (std::size_t r = 0; r < opt.repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      const Tensor<float> y = run();
      times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      if (y.numel() == 0) throw Error("run_scaling: empty kernel output");
    }
    out.push_back({to_string(kernel), n, opt.k, opt.s, opt.repeats, detail::median(times), peak_allocation_bytes()});
  }
  return out;
}

/// Ordinary least-squares slope of log(median_s) against log(N).
inline double fit_slope(const std::vector<BenchResult>& results) {
  if (results.size() < 3) throw ContractError("fit_slope: need at least 3 results, got " + std::to_string(results.size()));
  double mx = 0.0, my = 0.0;
  for (const auto& r : results) {
    if (r.n == 0 || !(r.median_s > 0.0)) throw ContractError("fit_slope: N and time must be positive");
    mx += std::log(static_cast<double>(r.n));
    my += std::log(r.median_s);
  }
  const double cnt = static_cast<double>(results.size());
  mx /= cnt;
  my /= cnt;
  double sxx = 0.0, sxy = 0.0;
  for (const auto& r : results) {
    const double dx = std::log(static_cast<double>(r.n)) - mx;
    sxx += dx * dx;
    sxy += dx * (std::log(r.median_s) - my);
  }
  if (sxx < 1e-12) throw ContractError("fit_slope: N values have no spread");
  return sxy / sxx;
}

inline void write_bench_csv(std::ostream& os, const std::vector<BenchResult>& results, bool header = true) {
  if (header) os << "kernel,N,K,S,median_s,mem_bytes\n";
  for (const auto& r : results) {
    os << r.kernel << ',' << r.n << ',' << r.k << ',' << r.s << ',' << r.median_s << ',' << r.mem_bytes << '\n';
  }
}

inline nlohmann::json bench_summary(const std::vector<std::vector<BenchResult>>& per_kernel) {
  nlohmann::json slopes = nlohmann::json::object();
  for (const auto& rs : per_kernel) {
    if (rs.empty()) continue;
    slopes[rs.front().kernel] = rs.size() >= 3 ? nlohmann::json(fit_slope(rs)) : nlohmann::json(nullptr);
  }
  return {{"summary", "bench"}, {"slopes", slopes}};
}

}  // namespace cdformer
