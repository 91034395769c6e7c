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

// Multi-head neighborhood attention with context-aware position encoding.
//
// Every attention variant in the model is the same primitive: a query row
// attends to K gathered key/value rows. Per head h with d = C / H:
//
//   logit[j] = (<q_h, k_jh> + bias[h, j]) / sqrt(d)
//   out_h    = sum_j softmax(logit)[j] * (v_jh + v_offset_jh)
//
// With context-aware encoding, e_q, e_k, e_v are two-layer MLPs of the
// offset dp_j = p_j - p_query, and bias[h, j] = <e_q[j]_h, q_h> + <e_k[j]_h, k_jh>,
// v_offset = e_v. The "Sum" readout of the neighbor attentions is this
// softmax-weighted sum over K.
//
//   local self-attention:  queries = patch points, keys = the same patch
//   collect:               proxies (max over patch) attend to nearby proxies
//   distribute:            points attend to their nearest proxies

#include <cmath>
#include <string>
#include <vector>

#include "cdformer/geometry.hpp"
#include "cdformer/ops.hpp"

namespace cdformer {

enum class PositionEncoding {
  kNone,          // no positional term
  kRelative,      // offset MLPs added to logits/values without touching q, k
  kContextAware,  // offsets interacted with q and k
  kAbsolute,      // MLP of absolute coordinates added to q, k, v
};

inline const char* to_string(PositionEncoding pe) {
  switch (pe) {
    case PositionEncoding::kNone: return "none";
    case PositionEncoding::kRelative: return "relative";
    case PositionEncoding::kContextAware: return "context_aware";
    case PositionEncoding::kAbsolute: return "absolute";
  }
  return "?";
}

inline PositionEncoding position_encoding_from_string(const std::string& s) {
  if (s == "none") return PositionEncoding::kNone;
  if (s == "relative") return PositionEncoding::kRelative;
  if (s == "context_aware") return PositionEncoding::kContextAware;
  if (s == "absolute") return PositionEncoding::kAbsolute;
  throw ConfigError("unknown position encoding '" + s + "'");
}

/// Two-layer perceptron fc2(gelu(fc1(x))).
template <Scalar T>
struct Mlp {
  LinearParams<T> fc1;
  LinearParams<T> fc2;
};

template <Scalar T>
Tensor<T> mlp_forward(const Tensor<T>& x, const Mlp<T>& m) {
  return linear(gelu(linear(x, m.fc1)), m.fc2);
}

template <Scalar T>
struct AttentionParams {
  LinearParams<T> wq, wk, wv, w_out;
  std::size_t heads = 1;

  std::size_t channels() const { return wq.out_features(); }
  std::size_t head_dim() const { return channels() / heads; }
};

/// Offset embeddings for queries, keys and values (3 -> C -> C each).
template <Scalar T>
struct CapeParams {
  Mlp<T> q, k, v;
};

template <Scalar T>
struct AttentionLayer {
  AttentionParams<T> attn;
  CapeParams<T> cape;
};

template <Scalar T>
struct NeighborhoodAttentionInput {
  Tensor<T> query_feats;  // A x C
  Tensor<T> key_feats;    // A x K x C
  Tensor<T> value_feats;  // A x K x C
  Tensor<T> offsets;      // A x K x 3
};

template <Scalar T>
struct CapeTerms {
  Tensor<T> bias;          // A x H x K
  Tensor<T> value_offset;  // A x K x C
};

// ---------------------------------------------------------------- fused kernels

/// bias[a, h, j] = sum_{c in head h} eq[a, j, c] q[a, c] + ek[a, j, c] k[a, j, c].
template <Scalar T>
Tensor<T> cape_bias(const Tensor<T>& eq, const Tensor<T>& ek, const Tensor<T>& q, const Tensor<T>& k, std::size_t heads) {
  if (k.rank() != 3 || q.rank() != 2 || eq.shape() != k.shape() || ek.shape() != k.shape() || q.dim(0) != k.dim(0) ||
      q.dim(1) != k.dim(2)) {
    throw DimensionError("cape_bias: inconsistent shapes eq=" + shape_str(eq.shape()) + " ek=" + shape_str(ek.shape()) +
                         " q=" + shape_str(q.shape()) + " k=" + shape_str(k.shape()));
  }
  const std::size_t A = k.dim(0), K = k.dim(1), C = k.dim(2);
  if (heads == 0 || C % heads != 0) throw DimensionError("cape_bias: C=" + std::to_string(C) + " not divisible by H=" + std::to_string(heads));
  const std::size_t H = heads, d = C / H;
  std::vector<T> out(A * H * K);
  for (std::size_t a = 0; a < A; ++a) {
    for (std::size_t j = 0; j < K; ++j) {
      const T* eqr = eq.ptr() + (a * K + j) * C;
      const T* ekr = ek.ptr() + (a * K + j) * C;
      const T* kr = k.ptr() + (a * K + j) * C;
      const T* qr = q.ptr() + a * C;
      for (std::size_t h = 0; h < H; ++h) {
        T s = 0;
        for (std::size_t c = h * d; c < (h + 1) * d; ++c) s += eqr[c] * qr[c] + ekr[c] * kr[c];
        out[(a * H + h) * K + j] = s;
      }
    }
  }
  return make_result<T>("cape_bias", Shape{A, H, K}, std::move(out), {eq, ek, q, k},
                        [eq, ek, q, k, A, K, C, H, d](TensorNode<T>& self) {
                          T* geq = detail::grad_of(eq.node());
                          T* gek = detail::grad_of(ek.node());
                          T* gq = detail::grad_of(q.node());
                          T* gk = detail::grad_of(k.node());
                          for (std::size_t a = 0; a < A; ++a) {
                            for (std::size_t j = 0; j < K; ++j) {
                              const std::size_t row = (a * K + j) * C;
                              for (std::size_t h = 0; h < H; ++h) {
                                const T g = self.grad[(a * H + h) * K + j];
                                for (std::size_t c = h * d; c < (h + 1) * d; ++c) {
                                  if (geq) geq[row + c] += g * q[a * C + c];
                                  if (gq) gq[a * C + c] += g * eq[row + c];
                                  if (gek) gek[row + c] += g * k[row + c];
                                  if (gk) gk[row + c] += g * ek[row + c];
                                }
                              }
                            }
                          }
                        });
}

/// bias[a, h, j] = sum_{c in head h} e[a, j, c].
template <Scalar T>
Tensor<T> head_sum_bias(const Tensor<T>& e, std::size_t heads) {
  if (e.rank() != 3 || heads == 0 || e.dim(2) % heads != 0) {
    throw DimensionError("head_sum_bias: bad shape " + shape_str(e.shape()) + " for H=" + std::to_string(heads));
  }
  const std::size_t A = e.dim(0), K = e.dim(1), C = e.dim(2), H = heads, d = C / H;
  std::vector<T> out(A * H * K, T(0));
  for (std::size_t a = 0; a < A; ++a) {
    for (std::size_t j = 0; j < K; ++j) {
      for (std::size_t c = 0; c < C; ++c) out[(a * H + c / d) * K + j] += e[(a * K + j) * C + c];
    }
  }
  return make_result<T>("head_sum_bias", Shape{A, H, K}, std::move(out), {e}, [e, A, K, C, H, d](TensorNode<T>& self) {
    T* ge = detail::grad_of(e.node());
    if (!ge) return;
    for (std::size_t a = 0; a < A; ++a) {
      for (std::size_t j = 0; j < K; ++j) {
        for (std::size_t c = 0; c < C; ++c) ge[(a * K + j) * C + c] += self.grad[(a * H + c / d) * K + j];
      }
    }
  });
}

/// Multi-head softmax attention of q [A, C] over k, v [A, K, C] with an
/// optional additive logit bias [A, H, K]. If `weights` is non-null it
/// receives the attention probabilities [A, H, K].
template <Scalar T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& bias, std::size_t heads,
                 std::vector<T>* weights = nullptr) {
  if (q.rank() != 2 || k.rank() != 3 || v.shape() != k.shape() || k.dim(0) != q.dim(0) || k.dim(2) != q.dim(1)) {
    throw DimensionError("attend: inconsistent shapes q=" + shape_str(q.shape()) + " k=" + shape_str(k.shape()) +
                         " v=" + shape_str(v.shape()));
  }
  const std::size_t A = k.dim(0), K = k.dim(1), C = k.dim(2);
  if (K < 1) throw DimensionError("attend: need at least one key");
  if (heads == 0 || C % heads != 0) throw DimensionError("attend: C=" + std::to_string(C) + " not divisible by H=" + std::to_string(heads));
  const std::size_t H = heads, d = C / H;
  if (bias.defined() && bias.shape() != Shape{A, H, K}) {
    throw DimensionError("attend: bias " + shape_str(bias.shape()) + " expected " + shape_str({A, H, K}));
  }
  const T denom = std::sqrt(static_cast<T>(d));
  auto alpha = std::make_shared<std::vector<T>>(A * H * K);
  std::vector<T> out(A * C, T(0));
  parallel_for(A, 256, [&](std::size_t b, std::size_t e) {
    std::vector<T> logit(K);
    for (std::size_t a = b; a < e; ++a) {
      for (std::size_t h = 0; h < H; ++h) {
        const T* qh = q.ptr() + a * C + h * d;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < K; ++j) {
          const T* kh = k.ptr() + (a * K + j) * C + h * d;
          T s = 0;
          for (std::size_t c = 0; c < d; ++c) s += qh[c] * kh[c];
          if (bias.defined()) s += bias[(a * H + h) * K + j];
          logit[j] = s / denom;
          mx = std::max(mx, logit[j]);
        }
        T z = 0;
        for (std::size_t j = 0; j < K; ++j) {
          logit[j] = std::exp(logit[j] - mx);
          z += logit[j];
        }
        T* al = alpha->data() + (a * H + h) * K;
        T* o = out.data() + a * C + h * d;
        for (std::size_t j = 0; j < K; ++j) {
          al[j] = logit[j] / z;
          const T* vh = v.ptr() + (a * K + j) * C + h * d;
          for (std::size_t c = 0; c < d; ++c) o[c] += al[j] * vh[c];
        }
      }
    }
  });
  if (weights) *weights = *alpha;
  return make_result<T>(
      "attend", Shape{A, C}, std::move(out), {q, k, v, bias}, [q, k, v, bias, alpha, A, K, C, H, d, denom](TensorNode<T>& self) {
        T* gq = detail::grad_of(q.node());
        T* gk = detail::grad_of(k.node());
        T* gv = detail::grad_of(v.node());
        T* gb = bias.defined() ? detail::grad_of(bias.node()) : nullptr;
        parallel_for(A, 256, [&](std::size_t b, std::size_t e) {
          std::vector<T> dalpha(K);
          for (std::size_t a = b; a < e; ++a) {
            const T* g = self.grad.data() + a * C;
            for (std::size_t h = 0; h < H; ++h) {
              const T* al = alpha->data() + (a * H + h) * K;
              T dot = 0;
              for (std::size_t j = 0; j < K; ++j) {
                const std::size_t row = (a * K + j) * C + h * d;
                T s = 0;
                for (std::size_t c = 0; c < d; ++c) s += g[h * d + c] * v[row + c];
                dalpha[j] = s;
                dot += al[j] * s;
                if (gv) {
                  for (std::size_t c = 0; c < d; ++c) gv[row + c] += al[j] * g[h * d + c];
                }
              }
              for (std::size_t j = 0; j < K; ++j) {
                const T dlogit = al[j] * (dalpha[j] - dot);
                const T ds = dlogit / denom;
                const std::size_t row = (a * K + j) * C + h * d;
                if (gq) {
                  for (std::size_t c = 0; c < d; ++c) gq[a * C + h * d + c] += ds * k[row + c];
                }
                if (gk) {
                  for (std::size_t c = 0; c < d; ++c) gk[row + c] += ds * q[a * C + h * d + c];
                }
                if (gb) gb[(a * H + h) * K + j] += ds;
              }
            }
          }
        });
      });
}

// ---------------------------------------------------------------- position encoding

/// Logit bias and value offset from relative offsets [A, K, 3] interacted
/// with projected queries q [A, C] and keys k [A, K, C].
template <Scalar T>
CapeTerms<T> cape_terms(const Tensor<T>& offsets, const Tensor<T>& q, const Tensor<T>& k, const CapeParams<T>& p,
                        std::size_t heads) {
  if (offsets.rank() != 3 || offsets.dim(2) != 3 || k.rank() != 3 || offsets.dim(0) != k.dim(0) || offsets.dim(1) != k.dim(1)) {
    throw DimensionError("cape_terms: offsets " + shape_str(offsets.shape()) + " do not match keys " + shape_str(k.shape()));
  }
  const Tensor<T> eq = mlp_forward(offsets, p.q);
  const Tensor<T> ek = mlp_forward(offsets, p.k);
  CapeTerms<T> out;
  out.bias = cape_bias(eq, ek, q, k, heads);
  out.value_offset = mlp_forward(offsets, p.v);
  return out;
}

namespace detail {

/// Shared tail: positional terms, softmax readout and output projection.
template <Scalar T>
Tensor<T> attention_readout(Tensor<T> q, Tensor<T> k, Tensor<T> v, const Tensor<T>& offsets, const AttentionLayer<T>& layer,
                            PositionEncoding pe, std::vector<T>* weights) {
  const std::size_t H = layer.attn.heads;
  Tensor<T> bias;
  if (pe == PositionEncoding::kContextAware) {
    CapeTerms<T> terms = cape_terms(offsets, q, k, layer.cape, H);
    bias = terms.bias;
    v = add(v, terms.value_offset);
  } else if (pe == PositionEncoding::kRelative) {
    bias = head_sum_bias(add(mlp_forward(offsets, layer.cape.q), mlp_forward(offsets, layer.cape.k)), H);
    v = add(v, mlp_forward(offsets, layer.cape.v));
  }
  return linear(attend(q, k, v, bias, H, weights), layer.attn.w_out);
}

}  // namespace detail

/// Attention of pre-gathered neighborhoods (keys/values already [A, K, C]).
template <Scalar T>
Tensor<T> neighborhood_attention(const NeighborhoodAttentionInput<T>& inp, const AttentionLayer<T>& layer,
                                 PositionEncoding pe = PositionEncoding::kContextAware, std::vector<T>* weights = nullptr) {
  if (pe == PositionEncoding::kAbsolute) {
    throw ContractError("neighborhood_attention: absolute encoding needs positions; use attend_neighbors");
  }
  const auto& kf = inp.key_feats;
  if (kf.rank() != 3 || inp.value_feats.shape() != kf.shape() || inp.query_feats.rank() != 2 ||
      inp.query_feats.dim(0) != kf.dim(0) || kf.dim(1) < 1) {
    throw DimensionError("neighborhood_attention: inconsistent inputs q=" + shape_str(inp.query_feats.shape()) +
                         " k=" + shape_str(kf.shape()) + " v=" + shape_str(inp.value_feats.shape()));
  }
  if (layer.attn.channels() % layer.attn.heads != 0) throw DimensionError("neighborhood_attention: heads must divide C");
  Tensor<T> q = linear(inp.query_feats, layer.attn.wq);
  Tensor<T> k = linear(kf, layer.attn.wk);
  Tensor<T> v = linear(inp.value_feats, layer.attn.wv);
  return detail::attention_readout(q, k, v, inp.offsets, layer, pe, weights);
}

/// Neighbor lists of A queries into S source rows with their offsets.
/// Positions are only consumed by absolute encoding.
template <Scalar T>
struct Neighborhood {
  IndexTensor idx;       // A x K
  Tensor<T> offsets;     // A x K x 3
  Tensor<T> query_pos;   // A x 3
  Tensor<T> source_pos;  // S x 3
};

template <Scalar T>
Neighborhood<T> make_neighborhood(const Tensor<T>& query_coords, const Tensor<T>& source_coords, IndexTensor idx) {
  Neighborhood<T> nb;
  nb.offsets = neighbor_offsets(query_coords, source_coords, idx);
  nb.idx = std::move(idx);
  nb.query_pos = query_coords;
  nb.source_pos = source_coords;
  return nb;
}

template <Scalar T>
Neighborhood<T> make_neighborhood(const Tensor<T>& query_coords, const Tensor<T>& source_coords, std::size_t k) {
  return make_neighborhood(query_coords, source_coords, knn_indices(query_coords, source_coords, k));
}

/// Queries [A, C] attend to rows of source [S, C] picked by nb.idx. Keys and
/// values are projected once per source row and then gathered.
template <Scalar T>
Tensor<T> attend_neighbors(const Tensor<T>& query_feats, const Tensor<T>& source_feats, const Neighborhood<T>& nb,
                           const AttentionLayer<T>& layer, PositionEncoding pe = PositionEncoding::kContextAware,
                           std::vector<T>* weights = nullptr) {
  if (query_feats.rank() != 2 || query_feats.dim(0) != nb.idx.rows()) {
    throw DimensionError("attend_neighbors: " + std::to_string(nb.idx.rows()) + " neighbor lists for queries " +
                         shape_str(query_feats.shape()));
  }
  Tensor<T> q = linear(query_feats, layer.attn.wq);
  Tensor<T> ks = linear(source_feats, layer.attn.wk);
  Tensor<T> vs = linear(source_feats, layer.attn.wv);
  if (pe == PositionEncoding::kAbsolute) {
    if (!nb.query_pos.defined() || !nb.source_pos.defined()) {
      throw ContractError("attend_neighbors: absolute encoding needs query and source positions");
    }
    q = add(q, mlp_forward(nb.query_pos, layer.cape.q));
    ks = add(ks, mlp_forward(nb.source_pos, layer.cape.k));
    vs = add(vs, mlp_forward(nb.source_pos, layer.cape.v));
  }
  return detail::attention_readout(q, gather_rows(ks, nb.idx), gather_rows(vs, nb.idx), nb.offsets, layer, pe, weights);
}

/// Index lists for attention inside patches: flattened query (m, i) sees
/// flattened rows (m, 0..K-1).
inline IndexTensor patch_self_index(std::size_t m, std::size_t k) {
  IndexTensor idx(m * k, k);
  for (std::size_t p = 0; p < m; ++p) {
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) idx(p * k + i, j) = static_cast<std::int64_t>(p * k + j);
    }
  }
  return idx;
}

/// Pairwise offsets inside every patch: [M, K, K, 3] with
/// out[m, i, j] = p[nbr[m, j]] - p[nbr[m, i]].
template <Scalar T>
Tensor<T> patch_offsets(const Tensor<T>& coords, const PatchIndex& patch) {
  const std::size_t M = patch.num_patches(), K = patch.patch_size();
  std::vector<T> out(M * K * K * 3);
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t i = 0; i < K; ++i) {
      const auto qi = static_cast<std::size_t>(patch.neighbor_idx(m, i));
      for (std::size_t j = 0; j < K; ++j) {
        const auto kj = static_cast<std::size_t>(patch.neighbor_idx(m, j));
        for (std::size_t d = 0; d < 3; ++d) out[((m * K + i) * K + j) * 3 + d] = coords[kj * 3 + d] - coords[qi * 3 + d];
      }
    }
  }
  return Tensor<T>({M, K, K, 3}, std::move(out));
}

/// Neighborhood for local self-attention over the flattened patch rows.
template <Scalar T>
Neighborhood<T> patch_neighborhood(const Tensor<T>& coords, const PatchIndex& patch) {
  const std::size_t M = patch.num_patches(), K = patch.patch_size();
  Neighborhood<T> nb;
  nb.idx = patch_self_index(M, K);
  nb.offsets = patch_offsets(coords, patch).detach();
  {
    NoGradGuard ng;
    nb.offsets = reshape(nb.offsets, Shape{M * K, K, 3});
    nb.query_pos = reshape(gather_rows(coords, patch.neighbor_idx), Shape{M * K, 3});
  }
  nb.source_pos = nb.query_pos;
  return nb;
}

/// Full K x K attention inside each of M patches: [M, K, C] -> [M, K, C].
template <Scalar T>
Tensor<T> local_self_attention(const Tensor<T>& patch_feats, const Tensor<T>& patch_dp, const AttentionLayer<T>& layer,
                               PositionEncoding pe = PositionEncoding::kContextAware) {
  if (patch_feats.rank() != 3 || patch_dp.rank() != 4 || patch_dp.dim(0) != patch_feats.dim(0) ||
      patch_dp.dim(1) != patch_feats.dim(1) || patch_dp.dim(2) != patch_feats.dim(1) || patch_dp.dim(3) != 3) {
    throw DimensionError("local_self_attention: features " + shape_str(patch_feats.shape()) + " and offsets " +
                         shape_str(patch_dp.shape()) + " disagree");
  }
  const std::size_t M = patch_feats.dim(0), K = patch_feats.dim(1), C = patch_feats.dim(2);
  Neighborhood<T> nb;
  nb.idx = patch_self_index(M, K);
  nb.offsets = Tensor<T>({M * K, K, 3}, std::vector<T>(patch_dp.data().begin(), patch_dp.data().end()));
  const Tensor<T> flat = reshape(patch_feats, Shape{M * K, C});
  return reshape(attend_neighbors(flat, flat, nb, layer, pe), Shape{M, K, C});
}

/// Max-pools each patch into a proxy, then lets every proxy attend to its
/// k nearest proxies (by proxy coordinate).
template <Scalar T>
Tensor<T> collect(const Tensor<T>& patch_out, const Tensor<T>& proxy_coords, std::size_t k, const AttentionLayer<T>& layer,
                  PositionEncoding pe = PositionEncoding::kContextAware) {
  const std::size_t M = proxy_coords.dim(0);
  if (k < 1 || k > M) throw ContractError("collect: need 1 <= k <= M, got k=" + std::to_string(k) + ", M=" + std::to_string(M));
  if (patch_out.rank() != 3 || patch_out.dim(0) != M) {
    throw DimensionError("collect: patch features " + shape_str(patch_out.shape()) + " for " + std::to_string(M) + " proxies");
  }
  const Tensor<T> proxies = reduce_max_axis(patch_out);
  return attend_neighbors(proxies, proxies, make_neighborhood(proxy_coords, proxy_coords, k), layer, pe);
}

/// Every point attends to its k nearest proxies: [N, C] x [M, C] -> [N, C].
template <Scalar T>
Tensor<T> distribute(const Tensor<T>& point_feats, const Tensor<T>& point_coords, const Tensor<T>& proxies,
                     const Tensor<T>& proxy_coords, std::size_t k, const AttentionLayer<T>& layer,
                     PositionEncoding pe = PositionEncoding::kContextAware) {
  const std::size_t M = proxy_coords.dim(0);
  if (k < 1 || k > M) throw ContractError("distribute: need 1 <= k <= M, got k=" + std::to_string(k) + ", M=" + std::to_string(M));
  if (proxies.rank() != 2 || proxies.dim(0) != M) {
    throw DimensionError("distribute: proxies " + shape_str(proxies.shape()) + " for " + std::to_string(M) + " proxy coordinates");
  }
  return attend_neighbors(point_feats, proxies, make_neighborhood(point_coords, proxy_coords, k), layer, pe);
}

/// Dense all-pairs multi-head self-attention (no position terms), computed
/// row by row so memory stays O(N C). Forward only; used as the quadratic
/// baseline in benchmarks.
template <Scalar T>
Tensor<T> full_self_attention(const Tensor<T>& feats, const AttentionParams<T>& p) {
  NoGradGuard ng;
  const std::size_t N = feats.dim(0), C = p.channels(), H = p.heads, d = C / H;
  const Tensor<T> q = linear(feats, p.wq), k = linear(feats, p.wk), v = linear(feats, p.wv);
  const T denom = std::sqrt(static_cast<T>(d));
  std::vector<T> out(N * C, T(0));
  parallel_for(N, 64, [&](std::size_t b, std::size_t e) {
    std::vector<T> w(N);
    for (std::size_t i = b; i < e; ++i) {
      for (std::size_t h = 0; h < H; ++h) {
        const T* qh = q.ptr() + i * C + h * d;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < N; ++j) {
          const T* kh = k.ptr() + j * C + h * d;
          T s = 0;
          for (std::size_t c = 0; c < d; ++c) s += qh[c] * kh[c];
          w[j] = s / denom;
          mx = std::max(mx, w[j]);
        }
        T z = 0;
        for (std::size_t j = 0; j < N; ++j) {
          w[j] = std::exp(w[j] - mx);
          z += w[j];
        }
        T* o = out.data() + i * C + h * d;
        for (std::size_t j = 0; j < N; ++j) {
          const T a = w[j] / z;
          const T* vh = v.ptr() + j * C + h * d;
          for (std::size_t c = 0; c < d; ++c) o[c] += a * vh[c];
        }
      }
    }
  });
  return linear(Tensor<T>({N, C}, std::move(out)), p.w_out);
}

}  // namespace cdformer
