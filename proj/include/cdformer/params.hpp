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

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cdformer/attention.hpp"
#include "cdformer/ops.hpp"

namespace cdformer {

/// Named, ordered parameter registry. Linear weights are drawn from a normal
/// truncated at two standard deviations, biases start at zero and norm gains
/// at one. A dry-run store records shapes without allocating.
template <Scalar T>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0, double init_std = 0.02, bool dry_run = false)
      : rng_(seed), std_(init_std), dry_run_(dry_run) {}

  Tensor<T> add(const std::string& name, Shape shape, double fill_std, T fill = T(0)) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    count_ += shape_numel(shape);
    shapes_.emplace_back(name, shape);
    index_[name] = shapes_.size() - 1;
    if (dry_run_) {
      named_.emplace_back(name, Tensor<T>());
      return Tensor<T>();
    }
    Tensor<T> t(shape, fill);
    if (fill_std > 0.0) {
      std::normal_distribution<double> dist(0.0, fill_std);
      for (T& v : t.data()) {
        double x;
        do {
          x = dist(rng_);
        } while (std::abs(x) > 2.0 * fill_std);
        v = static_cast<T>(x);
      }
    }
    t.set_requires_grad(true);
    named_.emplace_back(name, t);
    return t;
  }

  LinearParams<T> linear(const std::string& name, std::size_t cin, std::size_t cout, bool bias = true) {
    LinearParams<T> p;
    p.weight = add(name + ".weight", {cin, cout}, std_);
    if (bias) p.bias = add(name + ".bias", {cout}, 0.0);
    return p;
  }

  NormParams<T> norm(const std::string& name, std::size_t c) {
    return {add(name + ".gamma", {c}, 0.0, T(1)), add(name + ".beta", {c}, 0.0)};
  }

  Mlp<T> mlp(const std::string& name, std::size_t cin, std::size_t hidden, std::size_t cout) {
    Mlp<T> m;
    m.fc1 = linear(name + ".fc1", cin, hidden);
    m.fc2 = linear(name + ".fc2", hidden, cout);
    return m;
  }

  /// Projections C -> C plus three offset MLPs 3 -> C -> C.
  AttentionLayer<T> attention(const std::string& name, std::size_t c, std::size_t heads) {
    if (heads == 0 || c % heads != 0) {
      throw ConfigError(name + ": heads=" + std::to_string(heads) + " must divide channels=" + std::to_string(c));
    }
    AttentionLayer<T> l;
    l.attn.heads = heads;
    l.attn.wq = linear(name + ".wq", c, c);
    l.attn.wk = linear(name + ".wk", c, c);
    l.attn.wv = linear(name + ".wv", c, c);
    l.attn.w_out = linear(name + ".w_out", c, c);
    l.cape.q = mlp(name + ".cape.q", 3, c, c);
    l.cape.k = mlp(name + ".cape.k", 3, c, c);
    l.cape.v = mlp(name + ".cape.v", 3, c, c);
    return l;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& named() const { return named_; }
  std::vector<std::pair<std::string, Tensor<T>>>& named() { return named_; }
  const std::vector<std::pair<std::string, Shape>>& shapes() const { return shapes_; }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return named_[it->second].second;
  }

  /// Total scalar parameter count.
  std::size_t count() const { return count_; }
  bool dry_run() const { return dry_run_; }

  void zero_grad() {
    for (auto& [name, t] : named_) {
      if (t.defined()) t.zero_grad();
    }
  }

 private:
  std::mt19937_64 rng_;
  double std_;
  bool dry_run_;
  std::size_t count_ = 0;
  std::vector<std::pair<std::string, Tensor<T>>> named_;
  std::vector<std::pair<std::string, Shape>> shapes_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace cdformer
