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

template <typename T>
PointCloud<T> random_cloud(std::size_t n, std::size_t channels, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<T> c(n * 3), f(n * channels);
  for (auto& v : c) v = static_cast<T>(u(rng));
  for (auto& v : f) v = static_cast<T>(u(rng));
  return {Tensor<T>({n, 3}, c), Tensor<T>({n, channels}, f), {}};
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

TEST(Params, LinearWithBiasCounts) {
  ParameterStore<float> s;
  s.linear("l", 2, 3);
  EXPECT_EQ(s.count(), 9u);
  ParameterStore<float> nb;
  nb.linear("l", 2, 3, false);
  EXPECT_EQ(nb.count(), 6u);
}

TEST(Params, DuplicateNameIsConfigError) {
  ParameterStore<float> s;
  s.linear("l", 2, 3);
  EXPECT_THROW(s.linear("l", 2, 3), ConfigError);
}

TEST(Params, DryRunMatchesAllocatedCount) {
  const auto cfg = preset("toy-seg");
  EXPECT_EQ(count_params(cfg), Model<float>(cfg).num_params());
}

TEST(Params, ScalingFamilyOrderedAndWithinBands) {
  const double s = static_cast<double>(count_params(preset("cdformer-s")));
  const double b = static_cast<double>(count_params(preset("cdformer-b")));
  const double l = static_cast<double>(count_params(preset("cdformer-l")));
  EXPECT_LT(s, b);
  EXPECT_LT(b, l);
  EXPECT_NEAR(s / 3.1e6, 1.0, 0.3);
  EXPECT_NEAR(b / 11.7e6, 1.0, 0.3);
  EXPECT_NEAR(l / 25.7e6, 1.0, 0.3);
}

TEST(Config, PresetsAndErrors) {
  const auto l = preset("cdformer-l");
  EXPECT_EQ(l.blocks, (std::vector<std::size_t>{2, 2, 6, 2}));
  EXPECT_EQ(l.channels.front(), 48u);
  EXPECT_EQ(l.k_neighbors, 16u);
  EXPECT_EQ(l.scale_s, 8u);
  const auto m = preset("modelnet-like");
  EXPECT_EQ(m.num_classes, 40u);
  EXPECT_EQ(m.task, Task::kClassification);
  EXPECT_EQ(preset("table7-k4").k_neighbors, 4u);
  EXPECT_FALSE(preset("table4-i").use_collect);
  EXPECT_FALSE(preset("table4-i").use_distribute);
  EXPECT_EQ(preset("table5-ii").position_encoding, PositionEncoding::kRelative);
  EXPECT_THROW(preset("nope"), ConfigError);
  for (const auto& name : preset_names()) EXPECT_NO_THROW(preset(name).validate()) << name;
  auto bad = preset("toy-cls");
  bad.heads[1] = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  auto c = preset("table5-iv");
  c.seed = 99;
  nlohmann::json j;
  to_json(j, c);
  ModelConfig back;
  from_json(j, back);
  nlohmann::json j2;
  to_json(j2, back);
  EXPECT_EQ(j, j2);
}

TEST(Model, ClassificationAndSegmentationShapes) {
  std::mt19937_64 rng(1);
  Model<float> cls(preset("toy-cls"));
  EXPECT_EQ(cls.forward(random_cloud<float>(256, 3, rng)).shape(), (Shape{1, 8}));
  Model<float> seg(preset("toy-seg"));
  EXPECT_EQ(seg.forward(random_cloud<float>(200, 3, rng)).shape(), (Shape{200, 4}));
  EXPECT_THROW(seg.forward(random_cloud<float>(200, 1, rng)), DimensionError);
}

TEST(Model, PyramidDownsamplesByScale) {
  std::mt19937_64 rng(2);
  Model<float> m(preset("toy-cls"));
  const auto pyr = m.encode(random_cloud<float>(1024, 3, rng));
  ASSERT_EQ(pyr.coords.size(), 4u);
  const std::vector<std::size_t> want{1024, 256, 64, 16}, width{16, 32, 64, 128};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(pyr.coords[i].dim(0), want[i]);
    EXPECT_EQ(pyr.feats[i].shape(), (Shape{want[i], width[i]}));
  }
}

TEST(Model, SmallCloudsClampK) {
  std::mt19937_64 rng(3);
  Model<float> m(preset("toy-cls"));
  EXPECT_EQ(m.forward(random_cloud<float>(16, 3, rng)).shape(), (Shape{1, 8}));
}

TEST(CdBlock, ZeroedResidualBranchesAreIdentity) {
  std::mt19937_64 rng(4);
  ParameterStore<double> store(4, 0.2);
  const auto p = make_block_params(store, "b", 8, 2, true, true);
  for (auto& [name, t] : store.named()) {
    if (ends_with(name, "w_out.weight") || ends_with(name, "fc2.weight") || ends_with(name, ".bias")) {
      std::fill(t.data().begin(), t.data().end(), 0.0);
    }
  }
  const auto cloud = random_cloud<double>(64, 8, rng);
  BlockOptions opt;
  opt.k = 8;
  const auto y = cd_block(cloud.feats, cloud.coords, p, opt);
  EXPECT_EQ(oracle::values(y), oracle::values(cloud.feats));
}

TEST(CdBlock, ShapePreservedForEveryVariant) {
  std::mt19937_64 rng(5);
  const auto cloud = random_cloud<double>(40, 8, rng);
  for (bool col : {false, true})
    for (bool dis : {false, true}) {
      ParameterStore<double> store(5, 0.1);
      const auto p = make_block_params(store, "b", 8, 2, col, dis);
      BlockOptions opt;
      opt.k = 8;
      opt.use_collect = col;
      opt.use_distribute = dis;
      EXPECT_EQ(cd_block(cloud.feats, cloud.coords, p, opt).shape(), (Shape{40, 8}));
    }
  ParameterStore<double> store(5, 0.1);
  const auto p = make_block_params(store, "b", 8, 2, true, true);
  BlockOptions opt;
  opt.k = 64;
  EXPECT_THROW(cd_block(cloud.feats, cloud.coords, p, opt), ContractError);
}

TEST(Decoder, SingleLevelPassesThrough) {
  std::mt19937_64 rng(6);
  Pyramid<double> pyr;
  const auto c = random_cloud<double>(10, 4, rng);
  pyr.feats.push_back(c.feats);
  pyr.coords.push_back(c.coords);
  EXPECT_EQ(oracle::values(decoder_forward(pyr, std::vector<DecoderLevel<double>>{})), oracle::values(c.feats));
}

TEST(Decoder, TwoLevelsRestoreFineResolution) {
  std::mt19937_64 rng(7);
  ParameterStore<double> store(7, 0.1);
  DecoderLevel<double> d{store.linear("p", 8, 4), store.linear("f", 4, 4), store.norm("n", 4)};
  Pyramid<double> pyr;
  const auto fine = random_cloud<double>(32, 4, rng), coarse = random_cloud<double>(8, 8, rng);
  pyr.feats = {fine.feats, coarse.feats};
  pyr.coords = {fine.coords, coarse.coords};
  EXPECT_EQ(decoder_forward(pyr, {d}).shape(), (Shape{32, 4}));
}

TEST(Model, ZeroHeadWeightsGiveHeadBias) {
  std::mt19937_64 rng(8);
  Model<float> m(preset("toy-seg"));
  auto w = m.params().get("head.fc2.weight");
  auto b = m.params().get("head.fc2.bias");
  std::fill(w.data().begin(), w.data().end(), 0.0f);
  const std::vector<float> bias{0.5f, -1.0f, 2.0f, 0.25f};
  std::copy(bias.begin(), bias.end(), b.data().begin());
  const auto y = m.forward(random_cloud<float>(64, 3, rng));
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y[i * 4 + c], bias[c]);
}

TEST(Model, SeedDeterminesWeights) {
  auto c = preset("toy-seg");
  c.seed = 3;
  Model<float> a(c), b(c);
  c.seed = 4;
  Model<float> d(c);
  const auto wa = a.params().get("stage1.block1.lsa.wq.weight");
  EXPECT_EQ(oracle::values(wa), oracle::values(b.params().get("stage1.block1.lsa.wq.weight")));
  EXPECT_NE(oracle::values(wa), oracle::values(d.params().get("stage1.block1.lsa.wq.weight")));
}

TEST(Model, SegmentationIsPermutationEquivariantAndTranslationInvariant) {
  std::mt19937_64 rng(9);
  auto cfg = preset("toy-seg");
  cfg.init_std = 0.2;
  cfg.in_channels = 1;
  Model<float> m(cfg);
  const std::size_t n = 128;
  auto cloud = random_cloud<float>(n, 1, rng);
  const auto y = m.forward(cloud);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<float> pc(n * 3), pf(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < 3; ++d) pc[i * 3 + d] = cloud.coords[perm[i] * 3 + d];
    pf[i] = cloud.feats[perm[i]];
  }
  const auto yp = m.forward(PointCloud<float>{Tensor<float>({n, 3}, pc), Tensor<float>({n, 1}, pf), {}});
  double dev = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 4; ++c) dev = std::max(dev, std::abs(double(yp[i * 4 + c]) - y[perm[i] * 4 + c]));
  EXPECT_LT(dev, 1e-5);
  std::vector<float> tc(cloud.coords.data().begin(), cloud.coords.data().end());
  for (std::size_t i = 0; i < tc.size(); ++i) tc[i] += (i % 3 == 2 ? -0.5f : 0.25f);
  const auto yt = m.forward(PointCloud<float>{Tensor<float>({n, 3}, tc), cloud.feats, {}});
  EXPECT_LT(oracle::max_abs_diff(oracle::values(y), oracle::values(yt)), 1e-5);
}
