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
#include <algorithm>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace cdformer;

namespace {

Tensor<double> rnd(Shape s, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = g(rng);
  return Tensor<double>(std::move(s), std::move(v));
}

AttentionLayer<double> random_layer(std::uint64_t seed, std::size_t c, std::size_t heads) {
  ParameterStore<double> store(seed, 0.4);
  auto l = store.attention("a", c, heads);
  // non-zero biases so the reference has to apply them too
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<double> g(0.0, 0.1);
  for (auto& [name, t] : store.named()) {
    if (name.size() > 5 && name.substr(name.size() - 5) == ".bias") {
      for (auto& v : t.data()) v = g(rng);
    }
  }
  return l;
}

void zero_cape(AttentionLayer<double>& l) {
  for (Mlp<double>* m : {&l.cape.q, &l.cape.k, &l.cape.v}) {
    for (LinearParams<double>* p : {&m->fc1, &m->fc2}) {
      std::fill(p->weight.data().begin(), p->weight.data().end(), 0.0);
      std::fill(p->bias.data().begin(), p->bias.data().end(), 0.0);
    }
  }
}

std::vector<std::vector<oracle::Pt>> offsets_of(const Tensor<double>& off) {
  const std::size_t A = off.dim(0), K = off.dim(1);
  std::vector<std::vector<oracle::Pt>> out(A, std::vector<oracle::Pt>(K));
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t d = 0; d < 3; ++d) out[a][k][d] = off[(a * K + k) * 3 + d];
  return out;
}

}  // namespace

TEST(Cape, ZeroMlpsGiveZeroTerms) {
  std::mt19937_64 rng(1);
  auto l = random_layer(1, 4, 2);
  zero_cape(l);
  const auto t = cape_terms(rnd({2, 3, 3}, rng), rnd({2, 4}, rng), rnd({2, 3, 4}, rng), l.cape, 2);
  for (double v : t.bias.data()) EXPECT_EQ(v, 0.0);
  for (double v : t.value_offset.data()) EXPECT_EQ(v, 0.0);
}

TEST(Cape, ZeroOffsetsWithZeroBiasesGiveZeroBias) {
  std::mt19937_64 rng(2);
  ParameterStore<double> store(2, 0.5);
  const auto l = store.attention("a", 4, 2);
  const auto t = cape_terms(Tensor<double>({2, 3, 3}, 0.0), rnd({2, 4}, rng), rnd({2, 3, 4}, rng), l.cape, 2);
  for (double v : t.bias.data()) EXPECT_EQ(v, 0.0);
}

TEST(Cape, HandSetSingleUnitMlps) {
  // e_q = [gelu(dx), 0], e_k = [0, gelu(dx)] from dp = (1, 0, 0); q = [2, 3], k = [5, 7]
  auto mk = [](std::vector<double> w1) {
    Mlp<double> m;
    m.fc1 = {Tensor<double>({3, 2}, std::move(w1)), Tensor<double>({2}, 0.0)};
    m.fc2 = {Tensor<double>({2, 2}, {1, 0, 0, 1}), Tensor<double>({2}, 0.0)};
    return m;
  };
  CapeParams<double> p{mk({1, 0, 0, 0, 0, 0}), mk({0, 1, 0, 0, 0, 0}), mk({0, 0, 0, 0, 0, 0})};
  const auto t = cape_terms(Tensor<double>({1, 1, 3}, {1, 0, 0}), Tensor<double>({1, 2}, {2, 3}),
                            Tensor<double>({1, 1, 2}, {5, 7}), p, 1);
  EXPECT_NEAR(t.bias.item(), 2.0 * oracle::gelu(1.0) + 7.0 * oracle::gelu(1.0), 1e-12);
}

TEST(NeighborhoodAttention, SingleNeighborReadsItsValue) {
  std::mt19937_64 rng(3);
  const auto l = random_layer(3, 4, 2);
  NeighborhoodAttentionInput<double> in{rnd({3, 4}, rng), rnd({3, 1, 4}, rng), rnd({3, 1, 4}, rng), rnd({3, 1, 3}, rng)};
  const auto y = neighborhood_attention(in, l);
  const auto v = linear(in.value_feats, l.attn.wv);
  const auto ev = mlp_forward(in.offsets, l.cape.v);
  const auto ref = linear(reshape(add(v, ev), Shape{3, 4}), l.attn.w_out);
  EXPECT_LT(oracle::max_abs_diff(oracle::values(y), oracle::values(ref)), 1e-12);
}

TEST(NeighborhoodAttention, MatchesScalarReference) {
  std::mt19937_64 rng(4);
  const std::size_t A = 2, K = 3, C = 4;
  const auto l = random_layer(4, C, 1);
  const auto qf = rnd({A, C}, rng), src = rnd({A * K, C}, rng), off = rnd({A, K, 3}, rng);
  std::vector<std::vector<std::int64_t>> idx{{0, 1, 2}, {3, 4, 5}};
  NeighborhoodAttentionInput<double> in{qf, reshape(src, Shape{A, K, C}), reshape(src, Shape{A, K, C}), off};
  const auto ref = oracle::neighborhood_attention(oracle::values(qf), oracle::values(src), idx, offsets_of(off),
                                                  oracle::Layer::from(l), C);
  EXPECT_LT(oracle::max_abs_diff(oracle::values(neighborhood_attention(in, l)), ref), 1e-6);
}

TEST(NeighborhoodAttention, WeightsSumToOneAndNeighborOrderIrrelevant) {
  std::mt19937_64 rng(5);
  const std::size_t A = 4, K = 5, C = 6;
  const auto l = random_layer(5, C, 3);
  const auto q = rnd({A, C}, rng), kv = rnd({A, K, C}, rng), off = rnd({A, K, 3}, rng);
  std::vector<double> w;
  const auto y = neighborhood_attention(NeighborhoodAttentionInput<double>{q, kv, kv, off}, l, PositionEncoding::kContextAware, &w);
  ASSERT_EQ(w.size(), A * 3 * K);
  for (std::size_t r = 0; r < A * 3; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < K; ++j) s += w[r * K + j];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  std::vector<std::size_t> perm{3, 0, 4, 2, 1};
  std::vector<double> kvp(kv.numel()), offp(off.numel());
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t j = 0; j < K; ++j) {
      for (std::size_t c = 0; c < C; ++c) kvp[(a * K + j) * C + c] = kv[(a * K + perm[j]) * C + c];
      for (std::size_t d = 0; d < 3; ++d) offp[(a * K + j) * 3 + d] = off[(a * K + perm[j]) * 3 + d];
    }
  const Tensor<double> kvt({A, K, C}, kvp);
  const auto yp = neighborhood_attention(NeighborhoodAttentionInput<double>{q, kvt, kvt, Tensor<double>({A, K, 3}, offp)}, l);
  EXPECT_LT(oracle::max_abs_diff(oracle::values(y), oracle::values(yp)), 1e-6);
}

TEST(NeighborhoodAttention, GradCheckBelowTenMicro) {
  std::mt19937_64 rng(6);
  const std::size_t A = 2, K = 3, C = 4;
  const auto l = random_layer(6, C, 2);
  std::vector<Tensor<double>> diff{rnd({A, C}, rng), rnd({A, K, C}, rng), rnd({A, K, C}, rng), rnd({A, K, 3}, rng)};
  for (const auto& t : detail::layer_tensors(l)) diff.push_back(t);
  const auto w = rnd({A, C}, rng);
  auto c = make_case(
      [](const auto& d, const auto& k) {
        using T = typename std::decay_t<decltype(d[0])>::value_type;
        const auto layer = detail::layer_from<T>(detail::slice(d, 4), 2);
        NeighborhoodAttentionInput<T> in{d[0], d[1], d[2], d[3]};
        return sum(mul(neighborhood_attention(in, layer), k[0]));
      },
      diff, {w});
  EXPECT_LT(run_case(c), 1e-5);
}

TEST(Lsa, SingletonPatchAttendsToItself) {
  std::mt19937_64 rng(7);
  const auto l = random_layer(7, 4, 2);
  const auto x = rnd({3, 1, 4}, rng);
  const auto y = local_self_attention(x, Tensor<double>({3, 1, 1, 3}, 0.0), l);
  const auto ev0 = mlp_forward(Tensor<double>({3, 3}, 0.0), l.cape.v);
  const auto v = add(linear(reshape(x, Shape{3, 4}), l.attn.wv), ev0);
  EXPECT_LT(oracle::max_abs_diff(oracle::values(y), oracle::values(linear(v, l.attn.w_out))), 1e-12);
}

TEST(Lsa, ZeroQueriesGiveMeanOfValues) {
  std::mt19937_64 rng(8);
  auto l = random_layer(8, 4, 2);
  zero_cape(l);
  std::fill(l.attn.wq.weight.data().begin(), l.attn.wq.weight.data().end(), 0.0);
  std::fill(l.attn.wq.bias.data().begin(), l.attn.wq.bias.data().end(), 0.0);
  const auto x = rnd({2, 3, 4}, rng);
  const auto y = local_self_attention(x, rnd({2, 3, 3, 3}, rng), l);
  const auto v = linear(x, l.attn.wv);
  for (std::size_t m = 0; m < 2; ++m) {
    std::vector<double> mean(4, 0.0);
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t c = 0; c < 4; ++c) mean[c] += v[(m * 3 + j) * 4 + c] / 3.0;
    const auto o = linear(Tensor<double>({1, 4}, mean), l.attn.w_out);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(y[(m * 3 + i) * 4 + c], o[c], 1e-12);
  }
}

TEST(Lsa, MatchesScalarReference) {
  std::mt19937_64 rng(9);
  const std::size_t M = 2, K = 4, C = 4;
  const auto l = random_layer(9, C, 2);
  const auto coords = Tensor<double>({M * K, 3}, oracle::random_coords(M * K, rng));
  const auto x = rnd({M, K, C}, rng);
  PatchIndex patch;
  patch.center_idx = {0, 4};
  patch.neighbor_idx = IndexTensor({M, K}, {0, 1, 2, 3, 4, 5, 6, 7});
  const auto dp = patch_offsets(coords, patch);
  std::vector<std::vector<std::int64_t>> idx;
  std::vector<std::vector<oracle::Pt>> off;
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t i = 0; i < K; ++i) {
      std::vector<std::int64_t> row;
      std::vector<oracle::Pt> o;
      for (std::size_t j = 0; j < K; ++j) {
        row.push_back(static_cast<std::int64_t>(m * K + j));
        oracle::Pt p{};
        for (std::size_t d = 0; d < 3; ++d) p[d] = coords[(m * K + j) * 3 + d] - coords[(m * K + i) * 3 + d];
        o.push_back(p);
      }
      idx.push_back(row);
      off.push_back(o);
    }
  const auto xv = oracle::values(x);
  const auto ref = oracle::neighborhood_attention(xv, xv, idx, off, oracle::Layer::from(l), C);
  EXPECT_LT(oracle::max_abs_diff(oracle::values(local_self_attention(x, dp, l)), ref), 1e-6);
}

TEST(Collect, SingleProxy) {
  std::mt19937_64 rng(10);
  const auto l = random_layer(10, 4, 1);
  const auto x = rnd({1, 3, 4}, rng);
  const auto y = collect(x, Tensor<double>({1, 3}, {0.1, 0.2, 0.3}), 1, l);
  const auto r = reduce_max_axis(x);
  const auto v = add(linear(r, l.attn.wv), mlp_forward(Tensor<double>({1, 3}, 0.0), l.cape.v));
  EXPECT_LT(oracle::max_abs_diff(oracle::values(y), oracle::values(linear(v, l.attn.w_out))), 1e-12);
}

TEST(Collect, ConstantPatchPoolsToThatRow) {
  const Tensor<double> x({2, 3, 2}, {1, 2, 1, 2, 1, 2, 3, 4, 3, 4, 3, 4});
  EXPECT_EQ(oracle::values(reduce_max_axis(x)), (oracle::Vec{1, 2, 3, 4}));
}

TEST(Collect, MatchesScalarReference) {
  std::mt19937_64 rng(11);
  const std::size_t M = 4, K = 3, C = 4, k = 2;
  const auto l = random_layer(11, C, 2);
  const auto x = rnd({M, K, C}, rng);
  const auto pcv = oracle::random_coords(M, rng);
  const auto pc = Tensor<double>({M, 3}, pcv);
  oracle::Vec pooled(M * C, -INFINITY);
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t j = 0; j < K; ++j)
      for (std::size_t c = 0; c < C; ++c) pooled[m * C + c] = std::max(pooled[m * C + c], x[(m * K + j) * C + c]);
  const auto pts = oracle::points(pcv);
  const auto idx = oracle::knn(pts, pts, k);
  std::vector<std::vector<oracle::Pt>> off(M);
  for (std::size_t m = 0; m < M; ++m)
    for (auto j : idx[m]) {
      const auto& p = pts[static_cast<std::size_t>(j)];
      off[m].push_back({p[0] - pts[m][0], p[1] - pts[m][1], p[2] - pts[m][2]});
    }
  const auto ref = oracle::neighborhood_attention(pooled, pooled, idx, off, oracle::Layer::from(l), C);
  EXPECT_LT(oracle::max_abs_diff(oracle::values(collect(x, pc, k, l)), ref), 1e-6);
  EXPECT_THROW(collect(x, pc, 5, l), ContractError);
}

TEST(Distribute, SingleProxyGetsFullWeight) {
  std::mt19937_64 rng(12);
  const auto l = random_layer(12, 4, 2);
  std::vector<double> w;
  const auto pts = Tensor<double>({5, 3}, oracle::random_coords(5, rng));
  const auto nb = make_neighborhood(pts, Tensor<double>({1, 3}, {0, 0, 0}), 1);
  attend_neighbors(rnd({5, 4}, rng), rnd({1, 4}, rng), nb, l, PositionEncoding::kContextAware, &w);
  for (double a : w) EXPECT_DOUBLE_EQ(a, 1.0);
}

TEST(Distribute, ZeroQueryIsUniform) {
  std::mt19937_64 rng(13);
  auto l = random_layer(13, 4, 2);
  zero_cape(l);
  std::vector<double> w;
  const auto pts = Tensor<double>({6, 3}, oracle::random_coords(6, rng));
  const auto prox = Tensor<double>({4, 3}, oracle::random_coords(4, rng));
  std::fill(l.attn.wq.weight.data().begin(), l.attn.wq.weight.data().end(), 0.0);
  std::fill(l.attn.wq.bias.data().begin(), l.attn.wq.bias.data().end(), 0.0);
  attend_neighbors(rnd({6, 4}, rng), rnd({4, 4}, rng), make_neighborhood(pts, prox, 3), l, PositionEncoding::kContextAware, &w);
  for (double a : w) EXPECT_NEAR(a, 1.0 / 3.0, 1e-12);
}

TEST(Distribute, MatchesScalarReference) {
  std::mt19937_64 rng(14);
  const std::size_t N = 8, M = 4, C = 4, k = 2;
  const auto l = random_layer(14, C, 2);
  const auto pv = oracle::random_coords(N, rng), qv = oracle::random_coords(M, rng);
  const auto feats = rnd({N, C}, rng), prox = rnd({M, C}, rng);
  const auto p = oracle::points(pv), q = oracle::points(qv);
  const auto idx = oracle::knn(p, q, k);
  std::vector<std::vector<oracle::Pt>> off(N);
  for (std::size_t i = 0; i < N; ++i)
    for (auto j : idx[i]) {
      const auto& s = q[static_cast<std::size_t>(j)];
      off[i].push_back({s[0] - p[i][0], s[1] - p[i][1], s[2] - p[i][2]});
    }
  const auto ref = oracle::neighborhood_attention(oracle::values(feats), oracle::values(prox), idx, off, oracle::Layer::from(l), C);
  const auto y = distribute(feats, Tensor<double>({N, 3}, pv), prox, Tensor<double>({M, 3}, qv), k, l);
  EXPECT_LT(oracle::max_abs_diff(oracle::values(y), ref), 1e-6);
  EXPECT_THROW(distribute(feats, Tensor<double>({N, 3}, pv), prox, Tensor<double>({M, 3}, qv), 5, l), ContractError);
}

TEST(Attention, TranslationInvariant) {
  std::mt19937_64 rng(15);
  const auto l = random_layer(15, 4, 2);
  const auto pv = oracle::random_coords(16, rng);
  auto tv = pv;
  for (std::size_t i = 0; i < tv.size(); ++i) tv[i] += (i % 3 == 1 ? 8.0 : -4.0);
  const auto feats = rnd({16, 4}, rng);
  const auto a = Tensor<double>({16, 3}, pv), b = Tensor<double>({16, 3}, tv);
  const auto pa = patch_divide(a, 4, 4), pb = patch_divide(b, 4, 4);
  const auto xa = reshape(gather_rows(feats, pa.neighbor_idx), Shape{4, 4, 4});
  const auto xb = reshape(gather_rows(feats, pb.neighbor_idx), Shape{4, 4, 4});
  EXPECT_LT(oracle::max_abs_diff(oracle::values(local_self_attention(xa, patch_offsets(a, pa), l)),
                                 oracle::values(local_self_attention(xb, patch_offsets(b, pb), l))),
            1e-9);
  const auto ca = select_rows(a, pa.center_idx), cb = select_rows(b, pb.center_idx);
  EXPECT_LT(oracle::max_abs_diff(oracle::values(collect(xa, ca, 2, l)), oracle::values(collect(xb, cb, 2, l))), 1e-9);
  const auto prox = rnd({4, 4}, rng);
  EXPECT_LT(oracle::max_abs_diff(oracle::values(distribute(feats, a, prox, ca, 3, l)),
                                 oracle::values(distribute(feats, b, prox, cb, 3, l))),
            1e-9);
}

TEST(Attention, ZeroCapeIsBitwiseBiasFree) {
  StrictModeGuard strict(true);
  std::mt19937_64 rng(16);
  ParameterStore<float> store(16, 0.3);
  auto l = store.attention("a", 8, 2);
  for (Mlp<float>* m : {&l.cape.q, &l.cape.k, &l.cape.v})
    for (LinearParams<float>* p : {&m->fc1, &m->fc2}) {
      std::fill(p->weight.data().begin(), p->weight.data().end(), 0.0f);
      std::fill(p->bias.data().begin(), p->bias.data().end(), 0.0f);
    }
  std::normal_distribution<float> g;
  std::vector<float> f(20 * 8), c(20 * 3);
  for (auto& v : f) v = g(rng);
  for (auto& v : c) v = g(rng);
  const Tensor<float> feats({20, 8}, f), coords({20, 3}, c);
  const auto nb = make_neighborhood(coords, coords, 5);
  const auto cape = attend_neighbors(feats, feats, nb, l, PositionEncoding::kContextAware);
  const auto none = attend_neighbors(feats, feats, nb, l, PositionEncoding::kNone);
  const auto rel = attend_neighbors(feats, feats, nb, l, PositionEncoding::kRelative);
  EXPECT_TRUE(std::equal(cape.data().begin(), cape.data().end(), none.data().begin()));
  EXPECT_TRUE(std::equal(rel.data().begin(), rel.data().end(), none.data().begin()));
}

TEST(Attention, FullAttentionMatchesDenseReference) {
  std::mt19937_64 rng(17);
  const std::size_t N = 10, C = 4;
  const auto l = random_layer(17, C, 2);
  const auto feats = rnd({N, C}, rng);
  std::vector<std::vector<std::int64_t>> idx(N);
  std::vector<std::vector<oracle::Pt>> off(N, std::vector<oracle::Pt>(N, oracle::Pt{0, 0, 0}));
  for (auto& row : idx) {
    row.resize(N);
    std::iota(row.begin(), row.end(), 0);
  }
  const auto fv = oracle::values(feats);
  const auto ref = oracle::neighborhood_attention(fv, fv, idx, off, oracle::Layer::from(l), C, false);
  EXPECT_LT(oracle::max_abs_diff(oracle::values(full_self_attention(feats, l.attn)), ref), 1e-9);
}
