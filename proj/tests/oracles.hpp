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

// Independent reference implementations used by the tests. Everything here
// works on plain std::vector<double> with scalar loops and deliberately
// avoids the library's kernels.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "cdformer/cdformer.hpp"

namespace oracle {

using Vec = std::vector<double>;
using Pt = std::array<double, 3>;

template <typename T>
Vec values(const cdformer::Tensor<T>& t) {
  return Vec(t.data().begin(), t.data().end());
}

inline std::vector<Pt> points(const Vec& flat) {
  std::vector<Pt> p(flat.size() / 3);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = {flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]};
  return p;
}

inline double sqdist(const Pt& a, const Pt& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

/// C[P x R] = A[P x Q] B[Q x R], triple loop.
inline Vec matmul(const Vec& a, const Vec& b, std::size_t P, std::size_t Q, std::size_t R) {
  Vec c(P * R, 0.0);
  for (std::size_t i = 0; i < P; ++i)
    for (std::size_t j = 0; j < R; ++j)
      for (std::size_t k = 0; k < Q; ++k) c[i * R + j] += a[i * Q + k] * b[k * R + j];
  return c;
}

/// Greedy max-min selection; seed = lexicographically smallest point, ties
/// on the max-min distance go to the lowest index.
inline std::vector<std::int64_t> fps(const std::vector<Pt>& p, std::size_t m) {
  std::size_t seed = 0;
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (p[i] < p[seed]) seed = i;
  }
  std::vector<std::int64_t> out{static_cast<std::int64_t>(seed)};
  while (out.size() < m) {
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      double dmin = INFINITY;
      for (auto s : out) dmin = std::min(dmin, sqdist(p[i], p[static_cast<std::size_t>(s)]));
      if (dmin > best) {
        best = dmin;
        arg = i;
      }
    }
    out.push_back(static_cast<std::int64_t>(arg));
  }
  return out;
}

/// Full sort of (distance, index) per query.
inline std::vector<std::vector<std::int64_t>> knn(const std::vector<Pt>& q, const std::vector<Pt>& p, std::size_t k) {
  std::vector<std::vector<std::int64_t>> out;
  for (const auto& x : q) {
    std::vector<std::pair<double, std::int64_t>> d;
    for (std::size_t i = 0; i < p.size(); ++i) d.emplace_back(sqdist(x, p[i]), static_cast<std::int64_t>(i));
    std::sort(d.begin(), d.end());
    std::vector<std::int64_t> row;
    for (std::size_t j = 0; j < k; ++j) row.push_back(d[j].second);
    out.push_back(row);
  }
  return out;
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

/// Dense layer parameters copied out of the library structs.
struct Dense {
  Vec w;  // in x out
  Vec b;  // out (empty = none)
  std::size_t in = 0, out = 0;

  template <typename T>
  static Dense from(const cdformer::LinearParams<T>& p) {
    Dense d;
    d.w = values(p.weight);
    d.in = p.weight.dim(0);
    d.out = p.weight.dim(1);
    if (p.bias.defined()) d.b = values(p.bias);
    return d;
  }

  Vec apply(const double* x) const {
    Vec y(out, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      double s = b.empty() ? 0.0 : b[o];
      for (std::size_t i = 0; i < in; ++i) s += x[i] * w[i * out + o];
      y[o] = s;
    }
    return y;
  }
};

struct Perceptron {
  Dense fc1, fc2;

  template <typename T>
  static Perceptron from(const cdformer::Mlp<T>& m) {
    return {Dense::from(m.fc1), Dense::from(m.fc2)};
  }

  Vec apply(const double* x) const {
    Vec h = fc1.apply(x);
    for (auto& v : h) v = gelu(v);
    return fc2.apply(h.data());
  }
};

struct Layer {
  Dense wq, wk, wv, wo;
  Perceptron pq, pk, pv;
  std::size_t heads = 1;

  template <typename T>
  static Layer from(const cdformer::AttentionLayer<T>& l) {
    return {Dense::from(l.attn.wq), Dense::from(l.attn.wk), Dense::from(l.attn.wv), Dense::from(l.attn.w_out),
            Perceptron::from(l.cape.q), Perceptron::from(l.cape.k), Perceptron::from(l.cape.v), l.attn.heads};
  }
};

/// Query a attends to source rows idx[a][j] with offsets off[a][j]:
///   logit_j = (<q_h, k_jh> + <eq_jh, q_h> + <ek_jh, k_jh>) / sqrt(d)
///   out     = w_out( concat_h sum_j softmax(logit)_j (v_jh + ev_jh) )
/// Position terms are omitted when `cape` is false.
inline Vec neighborhood_attention(const Vec& query_feats, const Vec& source_feats, const std::vector<std::vector<std::int64_t>>& idx,
                                  const std::vector<std::vector<Pt>>& off, const Layer& L, std::size_t C, bool cape = true) {
  const std::size_t A = idx.size(), H = L.heads, d = C / H;
  Vec out(A * C, 0.0);
  for (std::size_t a = 0; a < A; ++a) {
    const Vec q = L.wq.apply(&query_feats[a * C]);
    const std::size_t K = idx[a].size();
    std::vector<Vec> k(K), v(K), eq(K), ek(K), ev(K);
    for (std::size_t j = 0; j < K; ++j) {
      const double* src = &source_feats[static_cast<std::size_t>(idx[a][j]) * C];
      k[j] = L.wk.apply(src);
      v[j] = L.wv.apply(src);
      const double dp[3] = {off[a][j][0], off[a][j][1], off[a][j][2]};
      eq[j] = cape ? L.pq.apply(dp) : Vec(C, 0.0);
      ek[j] = cape ? L.pk.apply(dp) : Vec(C, 0.0);
      ev[j] = cape ? L.pv.apply(dp) : Vec(C, 0.0);
    }
    Vec concat(C, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      Vec logit(K);
      for (std::size_t j = 0; j < K; ++j) {
        double s = 0.0;
        for (std::size_t c = h * d; c < (h + 1) * d; ++c) s += q[c] * k[j][c] + eq[j][c] * q[c] + ek[j][c] * k[j][c];
        logit[j] = s / std::sqrt(static_cast<double>(d));
      }
      const double mx = *std::max_element(logit.begin(), logit.end());
      double z = 0.0;
      for (auto& l : logit) z += (l = std::exp(l - mx));
      for (std::size_t j = 0; j < K; ++j) {
        for (std::size_t c = h * d; c < (h + 1) * d; ++c) concat[c] += logit[j] / z * (v[j][c] + ev[j][c]);
      }
    }
    const Vec o = L.wo.apply(concat.data());
    std::copy(o.begin(), o.end(), out.begin() + static_cast<std::ptrdiff_t>(a * C));
  }
  return out;
}

inline double max_abs_diff(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Random coordinates with pairwise-distinct values.
inline Vec random_coords(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vec c(n * 3);
  for (auto& v : c) v = u(rng);
  return c;
}

}  // namespace oracle
