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

// Collect-and-distribute transformer: embedding, stages of CD blocks joined
// by FPS downsampling, an interpolation decoder and task heads.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "cdformer/attention.hpp"
#include "cdformer/config.hpp"
#include "cdformer/geometry.hpp"
#include "cdformer/ops.hpp"
#include "cdformer/params.hpp"

namespace cdformer {

/// Learnable weights of one CD block. Each of the three attention steps is
/// a pre-norm residual sublayer followed by its own feed-forward sublayer
/// (C -> 4C -> C).
template <Scalar T>
struct CdBlockParams {
  NormParams<T> norm1, norm2, norm3, norm4, norm5, norm6;
  AttentionLayer<T> lsa, nsa, nca;
  Mlp<T> ffn1, ffn2, ffn3;
  LinearParams<T> interp;  // replaces nca when distribute is disabled
};

struct BlockOptions {
  std::size_t k = 16;
  std::size_t block_scale = 4;
  bool use_collect = true;
  bool use_distribute = true;
  PositionEncoding position_encoding = PositionEncoding::kContextAware;
};

/// Patch division and neighbor lists of one resolution. Coordinates are
/// fixed within a stage, so every block of the stage shares this.
template <Scalar T>
struct StageGeometry {
  Tensor<T> coords;
  PatchIndex patch;
  Tensor<T> proxy_coords;
  Neighborhood<T> lsa;           // (M K) queries over flattened patch rows
  Neighborhood<T> proxy;         // proxies over proxies
  Neighborhood<T> point_proxy;   // points over proxies
  InterpolationPlan<T> interp;   // proxies -> points

  std::size_t num_points() const { return coords.dim(0); }
};

template <Scalar T>
StageGeometry<T> build_stage_geometry(const Tensor<T>& coords, const BlockOptions& opt) {
  const std::size_t n = coords.dim(0);
  if (n < opt.k) {
    throw ContractError("cd_block: need N >= K, got N=" + std::to_string(n) + ", K=" + std::to_string(opt.k));
  }
  StageGeometry<T> g;
  g.coords = coords.detach();
  g.patch = patch_divide(g.coords, opt.block_scale, opt.k);
  g.proxy_coords = select_rows(g.coords, g.patch.center_idx);
  const std::size_t m = g.patch.num_patches();
  const std::size_t kp = std::min(opt.k, m);
  g.lsa = patch_neighborhood(g.coords, g.patch);
  g.proxy = make_neighborhood(g.proxy_coords, g.proxy_coords, kp);
  g.point_proxy = make_neighborhood(g.coords, g.proxy_coords, kp);
  if (!opt.use_distribute) g.interp = interpolation_plan(g.proxy_coords, g.coords);
  return g;
}

/// One collect-and-distribute block on precomputed geometry:
///   x1 = x + scatter(LSA(norm1 x));      x1 += FFN1(norm2 x1)
///   R  = maxpool over patches of norm3 x1
///   z  = R + NSA(R);                     z  += FFN2(norm4 z)
///   x2 = x1 + NCA(norm5 x1, z);          out = x2 + FFN3(norm6 x2)
/// Without collect, z = R. Without distribute, NCA is replaced by inverse
/// distance interpolation of z followed by a linear layer.
template <Scalar T>
Tensor<T> cd_block(const Tensor<T>& x, const StageGeometry<T>& g, const CdBlockParams<T>& p, const BlockOptions& opt) {
  const std::size_t n = g.num_points();
  if (x.rank() != 2 || x.dim(0) != n) {
    throw DimensionError("cd_block: features " + shape_str(x.shape()) + " for " + std::to_string(n) + " points");
  }
  const std::size_t C = x.dim(1);
  const std::size_t M = g.patch.num_patches(), K = g.patch.patch_size();
  const auto pe = opt.position_encoding;

  const Tensor<T> h1 = reshape(gather_rows(layer_norm(x, p.norm1), g.patch.neighbor_idx), Shape{M * K, C});
  const Tensor<T> lsa = attend_neighbors(h1, h1, g.lsa, p.lsa, pe);
  Tensor<T> x1 = add(x, scatter_mean_rows(reshape(lsa, Shape{M, K, C}), g.patch.neighbor_idx, n));
  x1 = add(x1, mlp_forward(layer_norm(x1, p.norm2), p.ffn1));

  Tensor<T> z = reduce_max_axis(gather_rows(layer_norm(x1, p.norm3), g.patch.neighbor_idx));
  if (opt.use_collect) {
    z = add(z, attend_neighbors(z, z, g.proxy, p.nsa, pe));
    z = add(z, mlp_forward(layer_norm(z, p.norm4), p.ffn2));
  }

  Tensor<T> x2;
  if (opt.use_distribute) {
    x2 = add(x1, attend_neighbors(layer_norm(x1, p.norm5), z, g.point_proxy, p.nca, pe));
  } else {
    x2 = add(x1, linear(weighted_gather(z, g.interp.idx, g.interp.weights), p.interp));
  }
  return add(x2, mlp_forward(layer_norm(x2, p.norm6), p.ffn3));
}

/// Standalone form that divides the cloud itself; requires N >= K.
template <Scalar T>
Tensor<T> cd_block(const Tensor<T>& x, const Tensor<T>& coords, const CdBlockParams<T>& p, const BlockOptions& opt) {
  return cd_block(x, build_stage_geometry(coords, opt), p, opt);
}

template <Scalar T>
CdBlockParams<T> make_block_params(ParameterStore<T>& store, const std::string& prefix, std::size_t c, std::size_t heads,
                                   bool use_collect, bool use_distribute) {
  CdBlockParams<T> p;
  p.norm1 = store.norm(prefix + ".norm1", c);
  p.lsa = store.attention(prefix + ".lsa", c, heads);
  p.norm2 = store.norm(prefix + ".norm2", c);
  p.ffn1 = store.mlp(prefix + ".ffn1", c, 4 * c, c);
  p.norm3 = store.norm(prefix + ".norm3", c);
  if (use_collect) {
    p.nsa = store.attention(prefix + ".nsa", c, heads);
    p.norm4 = store.norm(prefix + ".norm4", c);
    p.ffn2 = store.mlp(prefix + ".ffn2", c, 4 * c, c);
  }
  if (use_distribute) {
    p.norm5 = store.norm(prefix + ".norm5", c);
    p.nca = store.attention(prefix + ".nca", c, heads);
  } else {
    p.interp = store.linear(prefix + ".interp", c, c);
  }
  p.norm6 = store.norm(prefix + ".norm6", c);
  p.ffn3 = store.mlp(prefix + ".ffn3", c, 4 * c, c);
  return p;
}

/// Per-point features and coordinates of every encoder stage, finest first.
template <Scalar T>
struct Pyramid {
  std::vector<Tensor<T>> feats;
  std::vector<Tensor<T>> coords;

  std::size_t levels() const { return feats.size(); }
};

template <Scalar T>
struct EmbedParams {
  LinearParams<T> lift;
  LinearParams<T> aggregate;
  NormParams<T> norm;
};

/// Local-aggregation embedding: per-point linear lift, max over the k nearest
/// neighbors, then linear + layer norm.
template <Scalar T>
Tensor<T> embed_input(const Tensor<T>& feats, const Tensor<T>& coords, const EmbedParams<T>& p, std::size_t k) {
  const IndexTensor nbr = knn_indices(coords, coords, std::min(k, coords.dim(0)));
  const Tensor<T> lifted = linear(feats, p.lift);
  return layer_norm(linear(reduce_max_axis(gather_rows(lifted, nbr)), p.aggregate), p.norm);
}

template <Scalar T>
struct Downsampled {
  Tensor<T> feats;
  Tensor<T> coords;
};

/// FPS keeps ceil(N / s) centers; each new feature is a linear map of the
/// max over the center's k nearest points.
template <Scalar T>
Downsampled<T> downsample_transition(const Tensor<T>& feats, const Tensor<T>& coords, std::size_t s, std::size_t k,
                                     const LinearParams<T>& proj) {
  if (s < 1) throw ContractError("downsample_transition: scale must be >= 1");
  const PatchIndex patch = patch_divide(coords, s, std::min(k, coords.dim(0)));
  Downsampled<T> out;
  out.coords = select_rows(coords, patch.center_idx);
  out.feats = linear(reduce_max_axis(gather_rows(feats, patch.neighbor_idx)), proj);
  return out;
}

template <Scalar T>
struct DecoderLevel {
  LinearParams<T> proj;  // coarse width -> fine width
  LinearParams<T> fuse;
  NormParams<T> norm;
};

/// Coarse-to-fine: interpolate, project, add the skip features, then
/// linear + norm + GELU. A single-level pyramid passes through unchanged.
template <Scalar T>
Tensor<T> decoder_forward(const Pyramid<T>& pyr, const std::vector<DecoderLevel<T>>& levels) {
  if (pyr.levels() == 0) throw ContractError("decoder_forward: empty pyramid");
  if (levels.size() + 1 != pyr.levels()) throw DimensionError("decoder_forward: pyramid/decoder level mismatch");
  Tensor<T> cur = pyr.feats.back();
  for (std::size_t i = pyr.levels() - 1; i-- > 0;) {
    const auto plan = interpolation_plan(pyr.coords[i + 1], pyr.coords[i]);
    const Tensor<T> up = linear(weighted_gather(cur, plan.idx, plan.weights), levels[i].proj);
    cur = gelu(layer_norm(linear(add(up, pyr.feats[i]), levels[i].fuse), levels[i].norm));
  }
  return cur;
}

/// Max over the coarsest points, then a two-layer perceptron: [1, U].
template <Scalar T>
Tensor<T> classify_head(const Pyramid<T>& pyr, const Mlp<T>& head) {
  const Tensor<T>& last = pyr.feats.back();
  const Tensor<T> pooled = reduce_max_axis(reshape(last, Shape{1, last.dim(0), last.dim(1)}));
  return mlp_forward(pooled, head);
}

/// Per-point two-layer perceptron: [N, U].
template <Scalar T>
Tensor<T> segment_head(const Tensor<T>& decoded, const Mlp<T>& head) {
  return mlp_forward(decoded, head);
}

template <Scalar T>
class Model {
 public:
  explicit Model(ModelConfig cfg, bool dry_run = false)
      : cfg_(std::move(cfg)), store_(cfg_.seed, cfg_.init_std, dry_run) {
    cfg_.validate();
    const std::size_t L = cfg_.stages();
    const std::size_t c1 = cfg_.embed_channels();
    embed_.lift = store_.linear("embed.lift", cfg_.in_channels, c1);
    embed_.aggregate = store_.linear("embed.aggregate", c1, c1);
    embed_.norm = store_.norm("embed.norm", c1);
    stages_.resize(L);
    for (std::size_t i = 0; i < L; ++i) {
      if (i > 0) {
        down_.push_back(store_.linear("down" + std::to_string(i + 1) + ".proj", cfg_.channels[i - 1], cfg_.channels[i]));
      }
      for (std::size_t b = 0; b < cfg_.blocks[i]; ++b) {
        stages_[i].push_back(make_block_params(store_,
                                               "stage" + std::to_string(i + 1) + ".block" + std::to_string(b + 1),
                                               cfg_.channels[i], cfg_.heads[i], cfg_.use_collect, cfg_.use_distribute));
      }
    }
    if (cfg_.task == Task::kSegmentation) {
      for (std::size_t i = 0; i + 1 < L; ++i) {
        const std::string pre = "decoder.up" + std::to_string(i + 1);
        DecoderLevel<T> d;
        d.proj = store_.linear(pre + ".proj", cfg_.channels[i + 1], cfg_.channels[i]);
        d.fuse = store_.linear(pre + ".fuse", cfg_.channels[i], cfg_.channels[i]);
        d.norm = store_.norm(pre + ".norm", cfg_.channels[i]);
        decoder_.push_back(d);
      }
      head_ = store_.mlp("head", c1, c1, cfg_.num_classes);
    } else {
      const std::size_t cl = cfg_.channels.back();
      head_ = store_.mlp("head", cl, cl, cfg_.num_classes);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }

  BlockOptions block_options(std::size_t n) const {
    BlockOptions o;
    o.k = std::min(cfg_.k_neighbors, n);
    o.block_scale = cfg_.proxy_scale();
    o.use_collect = cfg_.use_collect;
    o.use_distribute = cfg_.use_distribute;
    o.position_encoding = cfg_.position_encoding;
    return o;
  }

  /// Embedding plus every stage; K is capped at the stage's point count.
  Pyramid<T> encode(const PointCloud<T>& cloud) const {
    check_input(cloud);
    Pyramid<T> pyr;
    Tensor<T> coords = cloud.coords.detach();
    Tensor<T> x = embed_input(cloud.feats, coords, embed_, cfg_.k_neighbors);
    for (std::size_t i = 0; i < cfg_.stages(); ++i) {
      if (i > 0) {
        auto d = downsample_transition(x, coords, cfg_.scale_s, cfg_.k_neighbors, down_[i - 1]);
        x = d.feats;
        coords = d.coords;
      }
      if (!stages_[i].empty()) {
        const BlockOptions opt = block_options(coords.dim(0));
        const StageGeometry<T> g = build_stage_geometry(coords, opt);
        for (const auto& block : stages_[i]) x = cd_block(x, g, block, opt);
      }
      pyr.feats.push_back(x);
      pyr.coords.push_back(coords);
    }
    return pyr;
  }

  /// Classification: [1, U] logits. Segmentation: [N, U] logits.
  Tensor<T> forward(const PointCloud<T>& cloud) const {
    const Pyramid<T> pyr = encode(cloud);
    if (cfg_.task == Task::kClassification) return classify_head(pyr, head_);
    return segment_head(decoder_forward(pyr, decoder_), head_);
  }

  std::size_t num_params() const { return store_.count(); }

 private:
  void check_input(const PointCloud<T>& cloud) const {
    cloud.validate();
    if (cloud.channels() != cfg_.in_channels) {
      throw DimensionError("model expects " + std::to_string(cfg_.in_channels) + " input channels, cloud has " +
                           std::to_string(cloud.channels()));
    }
  }

  ModelConfig cfg_;
  ParameterStore<T> store_;
  EmbedParams<T> embed_;
  std::vector<std::vector<CdBlockParams<T>>> stages_;
  std::vector<LinearParams<T>> down_;
  std::vector<DecoderLevel<T>> decoder_;
  Mlp<T> head_;
};

/// Total scalar parameters of a configuration, without allocating weights.
inline std::size_t count_params(const ModelConfig& cfg) { return Model<float>(cfg, true).num_params(); }

}  // namespace cdformer
