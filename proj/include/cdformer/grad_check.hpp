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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cdformer/model.hpp"
#include "cdformer/params.hpp"

namespace cdformer {

/// Relative discrepancy used by every check: |a - n| / max(|a|, |n|, 1e-8).
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

struct GradCheckOptions {
  double eps = 1e-6;
  /// Test hook: offsets the first analytic gradient entry so the check must fail.
  bool corrupt = false;
};

/// Central differences against reverse mode, both in the dtype of x.
/// Returns the maximum relative error over all entries.
template <Scalar T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, double eps = 1e-6) {
  Tensor<T> leaf = x.detach();
  leaf.set_requires_grad(true);
  backward(f(leaf));
  std::vector<double> analytic(leaf.numel(), 0.0);
  if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
  NoGradGuard ng;
  double worst = 0.0;
  auto data = leaf.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const T orig = data[i];
    data[i] = orig + static_cast<T>(eps);
    const double up = static_cast<double>(f(leaf).item());
    data[i] = orig - static_cast<T>(eps);
    const double down = static_cast<double>(f(leaf).item());
    data[i] = orig;
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * eps)));
  }
  return worst;
}

/// Extended-precision reference type for finite differences. Rounding noise
/// of a float64 forward (about 1 ulp / 2h) would otherwise swamp gradients
/// near the 1e-8 floor.
using Extended = long double;

/// A scalar function available in float64 (reverse mode) and in extended
/// precision (finite differences) over matching inputs.
struct GradCheckCase {
  std::function<Tensor<double>()> f;
  std::vector<Tensor<double>> inputs;
  std::function<Tensor<Extended>()> ref;
  std::vector<Tensor<Extended>> ref_inputs;
};

/// `fn(diff, consts)` is generic over the scalar type; only `diff` entries are checked.
template <typename Fn>
GradCheckCase make_case(Fn fn, std::vector<Tensor<double>> diff, std::vector<Tensor<double>> consts = {}) {
  GradCheckCase c;
  c.inputs = diff;
  c.f = [fn, diff, consts] { return fn(diff, consts); };
  std::vector<Tensor<Extended>> ce;
  for (const auto& t : diff) c.ref_inputs.push_back(cast_tensor<Extended>(t));
  for (const auto& t : consts) ce.push_back(cast_tensor<Extended>(t));
  c.ref = [fn, ri = c.ref_inputs, ce] { return fn(ri, ce); };
  return c;
}

inline double run_case(GradCheckCase& c, const GradCheckOptions& opt = {}) {
  if (c.inputs.size() != c.ref_inputs.size()) throw ContractError("grad check: input/reference count mismatch");
  for (auto& x : c.inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  backward(c.f());
  NoGradGuard ng;
  const Extended h = static_cast<Extended>(opt.eps);
  double worst = 0.0;
  bool corrupt = opt.corrupt;
  for (std::size_t t = 0; t < c.inputs.size(); ++t) {
    const auto& x = c.inputs[t];
    auto ref = c.ref_inputs[t].data();
    if (ref.size() != x.numel()) throw ContractError("grad check: reference extent mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      double analytic = x.has_grad() ? static_cast<double>(x.grad()[i]) : 0.0;
      if (corrupt) {
        analytic += 1.0;
        corrupt = false;
      }
      const Extended orig = ref[i];
      ref[i] = orig + h;
      const Extended up = c.ref().item();
      ref[i] = orig - h;
      const Extended down = c.ref().item();
      ref[i] = orig;
      worst = std::max(worst, relative_error(analytic, static_cast<double>((up - down) / (2 * h))));
    }
  }
  return worst;
}

struct GradCheckResult {
  std::string module;
  std::string name;
  double max_rel_error = 0.0;
};

namespace detail {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = u(rng);
  return Tensor<double>(std::move(shape), std::move(d));
}

/// Scalar probe that weights every output entry differently so symmetric
/// gradient errors cannot cancel.
template <Scalar T>
Tensor<T> probe(const Tensor<T>& y, const Tensor<T>& w) {
  return sum(mul(y, w));
}

inline std::vector<Tensor<double>> layer_tensors(const AttentionLayer<double>& l) {
  std::vector<Tensor<double>> out;
  for (const LinearParams<double>* p : {&l.attn.wq, &l.attn.wk, &l.attn.wv, &l.attn.w_out, &l.cape.q.fc1, &l.cape.q.fc2,
                                        &l.cape.k.fc1, &l.cape.k.fc2, &l.cape.v.fc1, &l.cape.v.fc2}) {
    out.push_back(p->weight);
    out.push_back(p->bias);
  }
  return out;
}

/// Inverse of layer_tensors over the first 20 entries of t.
template <Scalar T>
AttentionLayer<T> layer_from(const std::vector<Tensor<T>>& t, std::size_t heads) {
  AttentionLayer<T> l;
  l.attn.heads = heads;
  std::size_t i = 0;
  for (LinearParams<T>* p : {&l.attn.wq, &l.attn.wk, &l.attn.wv, &l.attn.w_out, &l.cape.q.fc1, &l.cape.q.fc2,
                             &l.cape.k.fc1, &l.cape.k.fc2, &l.cape.v.fc1, &l.cape.v.fc2}) {
    p->weight = t[i++];
    p->bias = t[i++];
  }
  return l;
}

template <Scalar T>
std::vector<Tensor<T>> slice(const std::vector<Tensor<T>>& v, std::size_t from) {
  return std::vector<Tensor<T>>(v.begin() + static_cast<std::ptrdiff_t>(from), v.end());
}

}  // namespace detail

/// Finite-difference checks of every differentiable operation ("tensor",
/// "attention") and of a miniature collect-and-distribute model ("model").
/// An empty module selects all of them.
inline std::vector<GradCheckResult> run_grad_checks(const std::string& module = "", std::uint64_t seed = 0,
                                                    const GradCheckOptions& opt = {}) {
  if (!module.empty() && module != "tensor" && module != "attention" && module != "model") {
    throw ConfigError("unknown grad-check module '" + module + "' (expected tensor, attention or model)");
  }
  std::vector<GradCheckResult> out;
  std::mt19937_64 rng(seed);
  bool corrupt = opt.corrupt;
  auto wanted = [&](const std::string& mod) { return module.empty() || module == mod; };
  auto run = [&](const std::string& mod, const std::string& name, GradCheckCase c) {
    GradCheckOptions o = opt;
    o.corrupt = corrupt;
    corrupt = false;
    out.push_back({mod, name, run_case(c, o)});
  };
  auto rnd = [&](Shape s, double lo = -1.0, double hi = 1.0) { return detail::random_tensor(std::move(s), rng, lo, hi); };

  if (wanted("tensor")) {
    auto a = rnd({3, 4}), b = rnd({3, 4}), w = rnd({3, 4});
    run("tensor", "add", make_case([](const auto& d, const auto& c) { return detail::probe(add(d[0], d[1]), c[0]); }, {a, b}, {w}));
    run("tensor", "sub", make_case([](const auto& d, const auto& c) { return detail::probe(sub(d[0], d[1]), c[0]); }, {a, b}, {w}));
    run("tensor", "mul", make_case([](const auto& d, const auto& c) { return detail::probe(mul(d[0], d[1]), c[0]); }, {a, b}, {w}));
    run("tensor", "scale", make_case([](const auto& d, const auto& c) {
          using T = typename std::decay_t<decltype(d[0])>::value_type;
          return detail::probe(scale(d[0], T(1.7)), c[0]);
        }, {a}, {w}));
    run("tensor", "sum", make_case([](const auto& d, const auto&) { return sum(mul(d[0], d[0])); }, {a}));
    run("tensor", "mean", make_case([](const auto& d, const auto& c) { return mean(mul(d[0], c[0])); }, {a}, {w}));
    run("tensor", "reshape", make_case([](const auto& d, const auto& c) {
          return detail::probe(reshape(d[0], Shape{4, 3}), reshape(c[0], Shape{4, 3}));
        }, {a}, {w}));
    run("tensor", "gelu", make_case([](const auto& d, const auto& c) {
          using T = typename std::decay_t<decltype(d[0])>::value_type;
          return detail::probe(gelu(scale(d[0], T(3))), c[0]);
        }, {a}, {w}));
    run("tensor", "softmax_last", make_case([](const auto& d, const auto& c) {
          using T = typename std::decay_t<decltype(d[0])>::value_type;
          return detail::probe(softmax_last(scale(d[0], T(2))), c[0]);
        }, {a}, {w}));

    auto ma = rnd({2, 1, 3, 4}), mb = rnd({3, 4, 5}), mw = rnd({2, 3, 3, 5});
    run("tensor", "matmul", make_case([](const auto& d, const auto& c) { return detail::probe(matmul(d[0], d[1]), c[0]); },
                                      {ma, mb}, {mw}));

    auto x = rnd({2, 3, 4}), wt = rnd({4, 5}), bs = rnd({5}), lw = rnd({2, 3, 5});
    run("tensor", "linear", make_case([](const auto& d, const auto& c) {
          using T = typename std::decay_t<decltype(d[0])>::value_type;
          return detail::probe(linear(d[0], LinearParams<T>{d[1], d[2]}), c[0]);
        }, {x, wt, bs}, {lw}));

    auto nx = rnd({5, 6}), ng = rnd({6}, 0.5, 1.5), nb = rnd({6}), nw = rnd({5, 6});
    run("tensor", "layer_norm", make_case([](const auto& d, const auto& c) {
          using T = typename std::decay_t<decltype(d[0])>::value_type;
          return detail::probe(layer_norm(d[0], d[1], d[2], T(1e-5)), c[0]);
        }, {nx, ng, nb}, {nw}));

    const IndexTensor idx(Shape{4, 3}, {0, 2, 4, 1, 1, 3, 4, 0, 2, 3, 3, 3});
    auto gx = rnd({5, 3}), gw = rnd({4, 3, 3});
    run("tensor", "gather_rows", make_case([idx](const auto& d, const auto& c) { return detail::probe(gather_rows(d[0], idx), c[0]); },
                                           {gx}, {gw}));
    auto mx = rnd({4, 5, 3}), mxw = rnd({4, 3});
    run("tensor", "reduce_max_axis", make_case([](const auto& d, const auto& c) { return detail::probe(reduce_max_axis(d[0]), c[0]); },
                                               {mx}, {mxw}));
    auto sx = rnd({4, 3, 3}), sw = rnd({6, 3});
    run("tensor", "scatter_mean_rows",
        make_case([idx](const auto& d, const auto& c) { return detail::probe(scatter_mean_rows(d[0], idx, 6), c[0]); }, {sx}, {sw}));
    std::uniform_real_distribution<double> u(0.1, 1.0);
    std::vector<double> wts(12);
    for (auto& v : wts) v = u(rng);
    auto wgw = rnd({4, 3});
    run("tensor", "weighted_gather", make_case([idx, wts](const auto& d, const auto& c) {
          using T = typename std::decay_t<decltype(d[0])>::value_type;
          return detail::probe(weighted_gather(d[0], idx, std::vector<T>(wts.begin(), wts.end())), c[0]);
        }, {gx}, {wgw}));

    auto logits = rnd({4, 5}, -2.0, 2.0);
    const std::vector<std::int64_t> labels{0, 3, 4, 1};
    run("tensor", "ce_label_smoothing", make_case([labels](const auto& d, const auto&) {
          using T = typename std::decay_t<decltype(d[0])>::value_type;
          return ce_label_smoothing(d[0], labels, T(0.1));
        }, {logits}));
  }

  const std::size_t K = 4, C = 6, H = 2;
  if (wanted("attention")) {
    const std::size_t A = 3;
    auto eq = rnd({A, K, C}), ek = rnd({A, K, C}), q = rnd({A, C}), k = rnd({A, K, C}), w = rnd({A, H, K});
    run("attention", "cape_bias",
        make_case([](const auto& d, const auto& c) { return detail::probe(cape_bias(d[0], d[1], d[2], d[3], H), c[0]); },
                  {eq, ek, q, k}, {w}));
    run("attention", "head_sum_bias",
        make_case([](const auto& d, const auto& c) { return detail::probe(head_sum_bias(d[0], H), c[0]); }, {eq}, {w}));
    auto v = rnd({A, K, C}), bias = rnd({A, H, K}), wo = rnd({A, C});
    run("attention", "attend",
        make_case([](const auto& d, const auto& c) { return detail::probe(attend(d[0], d[1], d[2], d[3], H), c[0]); },
                  {q, k, v, bias}, {wo}));
    run("attention", "attend_no_bias", make_case([](const auto& d, const auto& c) {
          using T = typename std::decay_t<decltype(d[0])>::value_type;
          return detail::probe(attend(d[0], d[1], d[2], Tensor<T>(), H), c[0]);
        }, {q, k, v}, {wo}));

    const std::size_t N = 12, M = 3;
    const Tensor<double> coords = rnd({N, 3});
    const PatchIndex patch = patch_divide(coords, N / M, K);
    ParameterStore<double> store(seed + 1, 0.5);
    auto params = detail::layer_tensors(store.attention("a", C, H));
    const std::size_t P = params.size();

    auto feats = rnd({M, K, C}), fw = rnd({M, K, C});
    auto with = [&](std::vector<Tensor<double>> extra) {
      auto v2 = params;
      v2.insert(v2.end(), extra.begin(), extra.end());
      return v2;
    };
    const Tensor<double> dp = patch_offsets(coords, patch);
    run("attention", "lsa", make_case([P](const auto& d, const auto& c) {
          return detail::probe(local_self_attention(d[P], c[1], detail::layer_from(d, H)), c[0]);
        }, with({feats}), {fw, dp}));

    const Tensor<double> pc = select_rows(coords, patch.center_idx);
    auto pw = rnd({M, C});
    run("attention", "collect", make_case([P](const auto& d, const auto& c) {
          return detail::probe(collect(d[P], c[1], 2, detail::layer_from(d, H)), c[0]);
        }, with({feats}), {pw, pc}));

    auto pts = rnd({N, C}), prox = rnd({M, C}), nw = rnd({N, C});
    run("attention", "distribute", make_case([P](const auto& d, const auto& c) {
          return detail::probe(distribute(d[P], c[1], d[P + 1], c[2], 2, detail::layer_from(d, H)), c[0]);
        }, with({pts, prox}), {nw, coords, pc}));
    for (auto pe : {PositionEncoding::kNone, PositionEncoding::kRelative, PositionEncoding::kAbsolute}) {
      run("attention", std::string("attend_neighbors_") + to_string(pe), make_case([P, pe](const auto& d, const auto& c) {
            const auto nb = make_neighborhood(c[1], c[2], 2);
            return detail::probe(attend_neighbors(d[P], d[P + 1], nb, detail::layer_from(d, H), pe), c[0]);
          }, with({pts, prox}), {nw, coords, pc}));
    }
  }

  if (wanted("model")) {
    ModelConfig cfg = preset("mini");
    cfg.init_std = 0.5;
    cfg.seed = seed;
    const std::size_t N = 16;
    const Tensor<double> coords = rnd({N, 3});
    const Tensor<double> feats = rnd({N, cfg.in_channels});
    std::vector<std::int64_t> labels(N);
    for (std::size_t i = 0; i < N; ++i) labels[i] = static_cast<std::int64_t>(i % cfg.num_classes);

    // Same seed, same draws: both precisions start from identical weights.
    auto md = std::make_shared<Model<double>>(cfg);
    auto me = std::make_shared<Model<Extended>>(cfg);
    GradCheckCase c;
    for (auto& [name, t] : md->params().named()) c.inputs.push_back(t);
    for (auto& [name, t] : me->params().named()) c.ref_inputs.push_back(t);
    PointCloud<double> cd{coords, feats.detach(), {}};
    PointCloud<Extended> ce{cast_tensor<Extended>(coords), cast_tensor<Extended>(feats), {}};
    c.inputs.push_back(cd.feats);
    c.ref_inputs.push_back(ce.feats);
    c.f = [md, cd, labels] { return ce_label_smoothing(md->forward(cd), labels, 0.1); };
    c.ref = [me, ce, labels] { return ce_label_smoothing(me->forward(ce), labels, Extended(0.1)); };
    run("model", "mini_model_loss", std::move(c));

    const BlockOptions bo = md->block_options(N);
    const std::size_t bc = 8, bh = 2;
    auto blk = [&](auto tag) {
      using T = decltype(tag);
      auto store = std::make_shared<ParameterStore<T>>(seed + 7, 0.5);
      auto params = std::make_shared<CdBlockParams<T>>(make_block_params(*store, "blk", bc, bh, true, true));
      return std::make_pair(store, params);
    };
    auto [sd, pd] = blk(double{});
    auto [se, pe] = blk(Extended{});
    const Tensor<double> x = rnd({N, bc});
    GradCheckCase b;
    for (auto& [name, t] : sd->named()) b.inputs.push_back(t);
    for (auto& [name, t] : se->named()) b.ref_inputs.push_back(t);
    const Tensor<double> xd = x.detach();
    const Tensor<Extended> xe = cast_tensor<Extended>(x), ce_coords = cast_tensor<Extended>(coords);
    b.inputs.push_back(xd);
    b.ref_inputs.push_back(xe);
    b.f = [sd = sd, pd = pd, xd, coords, bo] { return mean(cd_block(xd, coords, *pd, bo)); };
    b.ref = [se = se, pe = pe, xe, ce_coords, bo] { return mean(cd_block(xe, ce_coords, *pe, bo)); };
    run("model", "cd_block_mean", std::move(b));
  }
  return out;
}

}  // namespace cdformer
