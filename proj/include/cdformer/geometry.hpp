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

// Point-set kernels: sampling, neighbor search, patch division, voxel
// subsampling, relative offsets and inverse-distance interpolation.
// Distances are evaluated in double precision regardless of T.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "cdformer/ops.hpp"
#include "cdformer/tensor.hpp"

namespace cdformer {

/// Coordinates (N x 3), features (N x C, C may be 0) and optional per-point
/// labels.
template <Scalar T>
struct PointCloud {
  Tensor<T> coords;
  Tensor<T> feats;
  std::vector<std::int64_t> labels;

  std::size_t size() const { return coords.defined() ? coords.dim(0) : 0; }
  std::size_t channels() const { return feats.defined() ? feats.dim(1) : 0; }
  bool has_labels() const { return !labels.empty(); }

  /// Throws ValidationError when extents disagree or labels fall outside [0, num_classes).
  void validate(std::int64_t num_classes = -1) const {
    if (!coords.defined() || coords.rank() != 2 || coords.dim(1) != 3 || coords.dim(0) < 1) {
      throw ValidationError("point cloud needs coords of shape [N>=1, 3]");
    }
    if (!feats.defined() || feats.rank() != 2 || feats.dim(0) != coords.dim(0)) {
      throw ValidationError("point cloud feats must have shape [N, C] with N=" + std::to_string(coords.dim(0)));
    }
    if (has_labels()) {
      if (labels.size() != size()) throw ValidationError("point cloud has " + std::to_string(labels.size()) + " labels for " + std::to_string(size()) + " points");
      for (std::int64_t l : labels) {
        if (l < 0 || (num_classes >= 0 && l >= num_classes)) {
          throw ValidationError("label " + std::to_string(l) + " outside [0, " + std::to_string(num_classes) + ")");
        }
      }
    }
  }
};

/// FPS centers (M) and their K nearest neighbors (M x K), both indexing the
/// parent cloud.
struct PatchIndex {
  std::vector<std::int64_t> center_idx;
  IndexTensor neighbor_idx;
  std::size_t scale = 1;

  std::size_t num_patches() const { return center_idx.size(); }
  std::size_t patch_size() const { return neighbor_idx.cols(); }
};

enum class FpsSeed { kLexicographic, kRandom };

namespace detail {

template <Scalar T>
void require_coords(const char* op, const Tensor<T>& c) {
  if (c.rank() != 2 || c.dim(1) != 3) throw DimensionError(std::string(op) + ": coordinates must be [N, 3], got " + shape_str(c.shape()));
}

inline double dist2(const double* a, const double* b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

template <Scalar T>
std::vector<double> to_double(const Tensor<T>& c) {
  return std::vector<double>(c.data().begin(), c.data().end());
}

}  // namespace detail

/// Greedy max-min subset of m points. The first pick is the lexicographically
/// smallest coordinate triple (or a seeded random point); each later pick
/// maximizes its distance to the selected set, ties to the lowest index.
template <Scalar T>
std::vector<std::int64_t> farthest_point_sample(const Tensor<T>& coords, std::size_t m,
                                                FpsSeed seed_rule = FpsSeed::kLexicographic,
                                                std::uint64_t rng_seed = 0) {
  detail::require_coords("farthest_point_sample", coords);
  const std::size_t n = coords.dim(0);
  if (m < 1 || m > n) {
    throw ContractError("farthest_point_sample: need 1 <= m <= N, got m=" + std::to_string(m) + ", N=" + std::to_string(n));
  }
  const std::vector<double> p = detail::to_double(coords);
  std::size_t first = 0;
  if (seed_rule == FpsSeed::kLexicographic) {
    for (std::size_t i = 1; i < n; ++i) {
      if (std::lexicographical_compare(&p[3 * i], &p[3 * i + 3], &p[3 * first], &p[3 * first + 3])) first = i;
    }
  } else {
    std::mt19937_64 rng(rng_seed);
    first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  }
  std::vector<std::int64_t> picked;
  picked.reserve(m);
  std::vector<double> mind(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  std::size_t cur = first;
  for (std::size_t s = 0; s < m; ++s) {
    picked.push_back(static_cast<std::int64_t>(cur));
    taken[cur] = 1;
    if (s + 1 == m) break;
    const double* c = &p[3 * cur];
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      const double d = detail::dist2(&p[3 * i], c);
      if (d < mind[i]) mind[i] = d;
      if (mind[i] > best_d) {
        best_d = mind[i];
        best = i;
      }
    }
    cur = best;
  }
  return picked;
}

/// Exact k nearest neighbors of every query, sorted by (distance, index).
template <Scalar T>
IndexTensor knn_indices(const Tensor<T>& queries, const Tensor<T>& points, std::size_t k) {
  detail::require_coords("knn_indices", queries);
  detail::require_coords("knn_indices", points);
  const std::size_t nq = queries.dim(0), n = points.dim(0);
  if (k < 1 || k > n) {
    throw ContractError("knn_indices: need 1 <= k <= N, got k=" + std::to_string(k) + ", N=" + std::to_string(n));
  }
  const std::vector<double> q = detail::to_double(queries);
  const std::vector<double> p = detail::to_double(points);
  IndexTensor out(nq, k);
  parallel_for(nq, 64, [&](std::size_t b, std::size_t e) {
    std::vector<std::pair<double, std::int64_t>> cand(n);
    for (std::size_t i = b; i < e; ++i) {
      for (std::size_t j = 0; j < n; ++j) cand[j] = {detail::dist2(&q[3 * i], &p[3 * j]), static_cast<std::int64_t>(j)};
      std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
      for (std::size_t j = 0; j < k; ++j) out(i, j) = cand[j].second;
    }
  });
  return out;
}

/// M = ceil(N / s) FPS centers, each with its k nearest points. The center
/// itself is always part of its own patch.
template <Scalar T>
PatchIndex patch_divide(const Tensor<T>& coords, std::size_t s, std::size_t k) {
  detail::require_coords("patch_divide", coords);
  if (s < 1) throw ContractError("patch_divide: scale must be >= 1");
  const std::size_t n = coords.dim(0);
  const std::size_t m = (n + s - 1) / s;
  PatchIndex out;
  out.scale = s;
  out.center_idx = farthest_point_sample(coords, m);
  IndexTensor centers({m}, out.center_idx);
  const Tensor<T> center_coords = gather_rows(coords.detach(), centers).detach();
  out.neighbor_idx = knn_indices(center_coords, coords, k);
  for (std::size_t i = 0; i < m; ++i) {
    const std::int64_t c = out.center_idx[i];
    bool found = false;
    for (std::size_t j = 0; j < k && !found; ++j) found = out.neighbor_idx(i, j) == c;
    if (!found) {
      // only reachable with duplicate coordinates
      for (std::size_t j = k - 1; j > 0; --j) out.neighbor_idx(i, j) = out.neighbor_idx(i, j - 1);
      out.neighbor_idx(i, 0) = c;
    }
  }
  return out;
}

/// Rows of coords selected by an index list, as a detached [M, 3] tensor.
template <Scalar T>
Tensor<T> select_rows(const Tensor<T>& x, const std::vector<std::int64_t>& idx) {
  IndexTensor it({idx.size()}, idx);
  NoGradGuard ng;
  return gather_rows(x, it);
}

/// keys[a, k] - queries[a].
template <Scalar T>
Tensor<T> relative_offsets(const Tensor<T>& queries, const Tensor<T>& keys) {
  if (queries.rank() != 2 || queries.dim(1) != 3 || keys.rank() != 3 || keys.dim(2) != 3 || keys.dim(0) != queries.dim(0)) {
    throw DimensionError("relative_offsets: expected [A, 3] and [A, K, 3], got " + shape_str(queries.shape()) + " and " +
                         shape_str(keys.shape()));
  }
  const std::size_t A = keys.dim(0), K = keys.dim(1);
  std::vector<T> out(A * K * 3);
  for (std::size_t a = 0; a < A; ++a) {
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t d = 0; d < 3; ++d) out[(a * K + k) * 3 + d] = keys[(a * K + k) * 3 + d] - queries[a * 3 + d];
    }
  }
  return Tensor<T>({A, K, 3}, std::move(out));
}

/// Offsets from each query point to its neighbors: points[idx[a, k]] - queries[a].
template <Scalar T>
Tensor<T> neighbor_offsets(const Tensor<T>& queries, const Tensor<T>& points, const IndexTensor& idx) {
  NoGradGuard ng;
  return relative_offsets(queries, gather_rows(points, idx));
}

/// Up to three nearest sources per destination with normalized
/// 1 / (d + 1e-8) weights; a coincident source (d < 1e-8) is copied exactly.
template <Scalar T>
struct InterpolationPlan {
  IndexTensor idx;
  std::vector<T> weights;
};

template <Scalar T>
InterpolationPlan<T> interpolation_plan(const Tensor<T>& src_coords, const Tensor<T>& dst_coords) {
  detail::require_coords("interpolate_upsample", src_coords);
  detail::require_coords("interpolate_upsample", dst_coords);
  if (src_coords.dim(0) < 1) throw ContractError("interpolate_upsample: need at least one source point");
  const std::size_t k = std::min<std::size_t>(3, src_coords.dim(0));
  InterpolationPlan<T> plan;
  plan.idx = knn_indices(dst_coords, src_coords, k);
  const std::size_t n = dst_coords.dim(0);
  plan.weights.assign(n * k, T(0));
  const std::vector<double> s = detail::to_double(src_coords);
  const std::vector<double> d = detail::to_double(dst_coords);
  for (std::size_t i = 0; i < n; ++i) {
    std::array<double, 3> w{};
    double total = 0.0;
    bool exact = false;
    for (std::size_t j = 0; j < k && !exact; ++j) {
      const double dist = std::sqrt(detail::dist2(&d[3 * i], &s[3 * static_cast<std::size_t>(plan.idx(i, j))]));
      if (dist < 1e-8) {
        w.fill(0.0);
        w[j] = 1.0;
        total = 1.0;
        exact = true;
      } else {
        w[j] = 1.0 / (dist + 1e-8);
        total += w[j];
      }
    }
    for (std::size_t j = 0; j < k; ++j) plan.weights[i * k + j] = static_cast<T>(w[j] / total);
  }
  return plan;
}

template <Scalar T>
Tensor<T> interpolate_upsample(const Tensor<T>& src_coords, const Tensor<T>& src_feats, const Tensor<T>& dst_coords) {
  if (src_feats.rank() != 2 || src_feats.dim(0) != src_coords.dim(0)) {
    throw DimensionError("interpolate_upsample: features " + shape_str(src_feats.shape()) + " do not match " +
                         std::to_string(src_coords.dim(0)) + " sources");
  }
  const auto plan = interpolation_plan(src_coords, dst_coords);
  return weighted_gather(src_feats, plan.idx, plan.weights);
}

/// Voxel-grid subsampling: one point per occupied cell of edge `grid` with
/// the centroid of member coordinates, the mean of member features and the
/// majority label (ties to the lowest class id). Cells are emitted in
/// ascending (z, y, x) key order.
template <Scalar T>
PointCloud<T> grid_subsample(const PointCloud<T>& cloud, double grid) {
  if (!(grid > 0.0)) throw ContractError("grid_subsample: grid size must be positive");
  detail::require_coords("grid_subsample", cloud.coords);
  const std::size_t n = cloud.size(), C = cloud.channels();
  struct Cell {
    std::array<double, 3> sum{};
    std::vector<double> feat;
    std::map<std::int64_t, std::size_t> votes;
    std::size_t count = 0;
  };
  std::map<std::array<std::int64_t, 3>, Cell> cells;
  for (std::size_t i = 0; i < n; ++i) {
    std::array<std::int64_t, 3> key{};
    for (std::size_t d = 0; d < 3; ++d) {
      // key order (z, y, x)
      key[2 - d] = static_cast<std::int64_t>(std::floor(static_cast<double>(cloud.coords[3 * i + d]) / grid));
    }
    Cell& cell = cells[key];
    if (cell.feat.empty()) cell.feat.assign(C, 0.0);
    for (std::size_t d = 0; d < 3; ++d) cell.sum[d] += cloud.coords[3 * i + d];
    for (std::size_t c = 0; c < C; ++c) cell.feat[c] += cloud.feats[i * C + c];
    if (cloud.has_labels()) cell.votes[cloud.labels[i]]++;
    cell.count++;
  }
  const std::size_t m = cells.size();
  std::vector<T> xyz(m * 3), f(m * C);
  PointCloud<T> out;
  std::size_t r = 0;
  for (const auto& [key, cell] : cells) {
    const double inv = 1.0 / static_cast<double>(cell.count);
    for (std::size_t d = 0; d < 3; ++d) xyz[r * 3 + d] = static_cast<T>(cell.sum[d] * inv);
    for (std::size_t c = 0; c < C; ++c) f[r * C + c] = static_cast<T>(cell.feat[c] * inv);
    if (cloud.has_labels()) {
      std::int64_t best = -1;
      std::size_t votes = 0;
      for (const auto& [label, v] : cell.votes) {
        if (v > votes) {
          best = label;
          votes = v;
        }
      }
      out.labels.push_back(best);
    }
    ++r;
  }
  out.coords = Tensor<T>({m, 3}, std::move(xyz));
  out.feats = Tensor<T>({m, C}, std::move(f));
  return out;
}

}  // namespace cdformer
