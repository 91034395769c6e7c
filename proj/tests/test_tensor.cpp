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
#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace cdformer;

namespace {

Tensor<double> leaf(Shape s, std::vector<double> v) {
  Tensor<double> t(std::move(s), std::move(v));
  t.set_requires_grad(true);
  return t;
}

Tensor<double> random_tensor(Shape s, std::mt19937_64& rng, bool grad = true) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = g(rng);
  Tensor<double> t(std::move(s), std::move(v));
  t.set_requires_grad(grad);
  return t;
}

}  // namespace

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  const auto y = matmul(Tensor<double>({2, 2}, {1, 0, 0, 1}), Tensor<double>({2, 2}, {3, 4, 5, 6}));
  EXPECT_EQ(oracle::values(y), (oracle::Vec{3, 4, 5, 6}));
}

TEST(Matmul, RowTimesColumn) {
  const auto y = matmul(Tensor<double>({1, 3}, {1, 2, 3}), Tensor<double>({3, 1}, {4, 5, 6}));
  EXPECT_EQ(y.shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(y[0], oracle::matmul({1, 2, 3}, {4, 5, 6}, 1, 3, 1)[0]);
}

TEST(Matmul, ZeroAnnihilates) {
  std::mt19937_64 rng(1);
  const auto y = matmul(Tensor<double>({3, 4}, 0.0), random_tensor({4, 5}, rng, false));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, MatchesTripleLoopOn16x16) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const auto a = random_tensor({16, 16}, rng, false), b = random_tensor({16, 16}, rng, false);
    const auto ref = oracle::matmul(oracle::values(a), oracle::values(b), 16, 16, 16);
    const auto y = oracle::values(matmul(a, b));
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-5 * std::max(1.0, std::abs(ref[i])));
  }
}

TEST(Matmul, BroadcastsLeadingBatch) {
  std::mt19937_64 rng(3);
  const auto a = random_tensor({3, 2, 4}, rng, false), b = random_tensor({4, 5}, rng, false);
  const auto y = matmul(a, b);
  ASSERT_EQ(y.shape(), (Shape{3, 2, 5}));
  const auto av = oracle::values(a), bv = oracle::values(b), yv = oracle::values(y);
  for (std::size_t s = 0; s < 3; ++s) {
    const oracle::Vec slice(av.begin() + static_cast<long>(s * 8), av.begin() + static_cast<long>(s * 8 + 8));
    const auto ref = oracle::matmul(slice, bv, 2, 4, 5);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(yv[s * 10 + i], ref[i], 1e-12);
  }
}

TEST(Matmul, MismatchNamesBothShapes) {
  try {
    matmul(Tensor<double>({2, 3}, 0.0), Tensor<double>({4, 2}, 0.0));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4, 2]"), std::string::npos) << msg;
  }
}

TEST(Softmax, UniformLogits) {
  const auto y = softmax_last(Tensor<double>({3}, {0, 0, 0}));
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, Singleton) { EXPECT_DOUBLE_EQ(softmax_last(Tensor<double>({1}, {-7.5})).item(), 1.0); }

TEST(Softmax, LargeLogitsDoNotOverflow) {
  const auto y = softmax_last(Tensor<double>({2}, {1000, 0}));
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(4);
  const auto x = random_tensor({6, 9}, rng, false);
  const auto y = softmax_last(x);
  std::vector<double> shifted(x.data().begin(), x.data().end());
  for (auto& v : shifted) v += 42.0;
  const auto ys = softmax_last(Tensor<double>({6, 9}, shifted));
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 9; ++c) {
      s += y[r * 9 + c];
      EXPECT_NEAR(y[r * 9 + c], ys[r * 9 + c], 1e-6);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  const auto yf = softmax_last(Tensor<float>({2, 3}, {1e3f, -2.f, 5.f, 0.1f, 0.2f, 0.3f}));
  EXPECT_NEAR(yf[0] + yf[1] + yf[2], 1.0f, 1e-6f);
  EXPECT_NEAR(yf[3] + yf[4] + yf[5], 1.0f, 1e-6f);
}

TEST(LayerNorm, ConstantInputGivesZero) {
  const auto y = layer_norm(Tensor<double>({3}, {1, 1, 1}), Tensor<double>({3}, 1.0), Tensor<double>({3}, 0.0), 1e-5);
  for (double v : y.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(LayerNorm, TwoValues) {
  const auto y = layer_norm(Tensor<double>({2}, {0, 2}), Tensor<double>({2}, 1.0), Tensor<double>({2}, 0.0), 1e-12);
  EXPECT_NEAR(y[0], -1.0, 1e-9);
  EXPECT_NEAR(y[1], 1.0, 1e-9);
}

TEST(LayerNorm, ZeroGainLeavesBeta) {
  const auto y = layer_norm(Tensor<double>({2}, {3, -4}), Tensor<double>({2}, 0.0), Tensor<double>({2}, 5.0), 1e-5);
  EXPECT_EQ(oracle::values(y), (oracle::Vec{5, 5}));
}

TEST(LayerNorm, RejectsNonPositiveEps) {
  EXPECT_THROW(layer_norm(Tensor<double>({2}, 1.0), Tensor<double>({2}, 1.0), Tensor<double>({2}, 0.0), 0.0), ContractError);
}

TEST(GatherRows, DirectLookup) {
  const auto y = gather_rows(Tensor<double>({3, 1}, {1, 2, 3}), IndexTensor({1, 2}, {0, 2}));
  EXPECT_EQ(y.shape(), (Shape{1, 2, 1}));
  EXPECT_EQ(oracle::values(y), (oracle::Vec{1, 3}));
}

TEST(GatherRows, ConstantIndexAndIdentity) {
  const Tensor<double> x({3, 2}, {1, 2, 3, 4, 5, 6});
  const auto z = gather_rows(x, IndexTensor({2, 2}, {0, 0, 0, 0}));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(z[2 * i], 1.0);
    EXPECT_EQ(z[2 * i + 1], 2.0);
  }
  const auto id = gather_rows(x, IndexTensor({3, 1}, {0, 1, 2}));
  EXPECT_EQ(id.shape(), (Shape{3, 1, 2}));
  EXPECT_EQ(oracle::values(id), oracle::values(x));
}

TEST(GatherRows, OutOfRangeNamesIndex) {
  try {
    gather_rows(Tensor<double>({3, 1}, 0.0), IndexTensor({1, 2}, {0, 7}));
    FAIL() << "expected IndexError";
  } catch (const IndexError& e) {
    EXPECT_NE(std::string(e.what()).find('7'), std::string::npos);
  }
}

TEST(GatherRows, BackwardConservesMass) {
  std::mt19937_64 rng(5);
  const auto x = random_tensor({5, 3}, rng);
  const auto y = gather_rows(x, IndexTensor({4, 3}, {0, 1, 1, 4, 4, 4, 2, 0, 3, 3, 1, 0}));
  const auto w = random_tensor({4, 3, 3}, rng, false);
  backward(sum(mul(y, w)));
  double gin = 0.0, gout = 0.0;
  for (double g : x.grad()) gin += g;
  for (double v : w.data()) gout += v;
  EXPECT_NEAR(gin, gout, 1e-12);
}

TEST(ReduceMax, SingletonAxis) {
  const Tensor<double> x({2, 1, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(oracle::values(reduce_max_axis(x)), oracle::values(x));
}

TEST(ReduceMax, PerChannelMax) {
  const auto y = reduce_max_axis(Tensor<double>({1, 2, 2}, {1, 5, 3, 2}));
  EXPECT_EQ(oracle::values(y), (oracle::Vec{3, 5}));
}

TEST(ReduceMax, TiesRouteGradientToFirst) {
  const auto x = leaf({1, 3, 2}, {7, 7, 7, 7, 7, 7});
  const auto y = reduce_max_axis(x);
  EXPECT_EQ(oracle::values(y), (oracle::Vec{7, 7}));
  backward(sum(y));
  EXPECT_EQ(oracle::Vec(x.grad().begin(), x.grad().end()), (oracle::Vec{1, 1, 0, 0, 0, 0}));
}

TEST(Linear, IdentityWeights) {
  LinearParams<double> p{Tensor<double>({2, 2}, {1, 0, 0, 1}), Tensor<double>({2}, 0.0)};
  const Tensor<double> x({3, 2}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(oracle::values(linear(x, p)), oracle::values(x));
}

TEST(Linear, HandComputed) {
  LinearParams<double> p{Tensor<double>({2, 1}, {1, 1}), Tensor<double>({1}, {0.5})};
  EXPECT_DOUBLE_EQ(linear(Tensor<double>({1, 2}, {1, 1}), p).item(), 2.5);
}

TEST(Linear, ZeroInputGivesBias) {
  LinearParams<double> p{Tensor<double>({2, 3}, 0.7), Tensor<double>({3}, {1, 2, 3})};
  const auto y = linear(Tensor<double>({2, 2}, 0.0), p);
  EXPECT_EQ(oracle::values(y), (oracle::Vec{1, 2, 3, 1, 2, 3}));
}

TEST(Linear, ShapeMismatch) {
  LinearParams<double> p{Tensor<double>({3, 1}, 1.0), Tensor<double>()};
  EXPECT_THROW(linear(Tensor<double>({1, 2}, 1.0), p), DimensionError);
}

TEST(Gelu, ZeroAndAsymptotes) {
  const auto y = gelu(Tensor<double>({3}, {0, 10, -10}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_LT(std::abs(y[1] - 10.0), 1e-4);
  EXPECT_LT(std::abs(y[2]), 1e-4);
  const auto yf = gelu(Tensor<float>({3}, {0.5f, -1.5f, 2.0f}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(yf[i], oracle::gelu(std::vector<double>{0.5, -1.5, 2.0}[i]), 1e-6);
}

TEST(Backward, SumGivesOnes) {
  const auto x = leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  const auto x = leaf({2}, {1, 2});
  backward(sum(mul(x, x)));
  EXPECT_EQ(oracle::Vec(x.grad().begin(), x.grad().end()), (oracle::Vec{2, 4}));
}

TEST(Backward, DetachedHasNoGradient) {
  const auto x = leaf({2}, {1, 2});
  const auto d = x.detach();
  backward(sum(mul(x, d)));
  EXPECT_FALSE(d.has_grad());
  EXPECT_TRUE(x.has_grad());
}

TEST(Backward, RepeatedCallsAccumulate) {
  const auto x = leaf({2}, {1, 2});
  const auto loss = sum(mul(x, x));
  backward(loss);
  backward(loss);
  EXPECT_EQ(oracle::Vec(x.grad().begin(), x.grad().end()), (oracle::Vec{4, 8}));
}

TEST(Backward, NonScalarIsContractError) {
  const auto x = leaf({2}, {1, 2});
  EXPECT_THROW(backward(x), ContractError);
}

TEST(ScatterMean, AveragesOverMemberships) {
  const auto y = scatter_mean_rows(Tensor<double>({2, 2, 1}, {1, 3, 5, 7}), IndexTensor({2, 2}, {0, 1, 1, 2}), 4);
  EXPECT_EQ(oracle::values(y), (oracle::Vec{1, 4, 7, 0}));
}

TEST(LabelSmoothing, UniformLogitsGiveLogU) {
  for (double eps : {0.0, 0.1, 0.5}) {
    const auto l = ce_label_smoothing(Tensor<double>({3, 10}, 0.0), {0, 4, 9}, eps);
    EXPECT_NEAR(l.item(), std::log(10.0), 1e-12);
  }
}

TEST(LabelSmoothing, LargeMarginWithoutSmoothingApproachesZero) {
  std::vector<double> v(4, 0.0);
  v[2] = 60.0;
  EXPECT_LT(ce_label_smoothing(Tensor<double>({1, 4}, v), {2}, 0.0).item(), 1e-20);
}

TEST(LabelSmoothing, ClosedFormForConfidentPrediction) {
  const std::size_t U = 10;
  const double eps = 0.1, margin = 12.0;
  std::vector<double> v(U, 0.0);
  v[3] = margin;
  const double z = std::exp(margin) + static_cast<double>(U - 1);
  double ref = 0.0;
  for (std::size_t c = 0; c < U; ++c) {
    const double p = (c == 3 ? std::exp(margin) : 1.0) / z;
    const double target = (c == 3 ? 1.0 - eps : 0.0) + eps / static_cast<double>(U);
    ref -= target * std::log(p);
  }
  EXPECT_NEAR(ce_label_smoothing(Tensor<double>({1, U}, v), {3}, eps).item(), ref, 1e-12);
}

TEST(LabelSmoothing, EpsZeroIsPlainCrossEntropy) {
  std::mt19937_64 rng(6);
  const auto x = random_tensor({4, 5}, rng, false);
  const std::vector<std::int64_t> labels{0, 3, 4, 1};
  double ref = 0.0;
  for (std::size_t r = 0; r < 4; ++r) {
    double mx = -INFINITY;
    for (std::size_t c = 0; c < 5; ++c) mx = std::max(mx, x[r * 5 + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < 5; ++c) z += std::exp(x[r * 5 + c] - mx);
    ref += -(x[r * 5 + static_cast<std::size_t>(labels[r])] - mx - std::log(z));
  }
  EXPECT_NEAR(ce_label_smoothing(x, labels, 0.0).item(), ref / 4.0, 1e-10);
}

TEST(LabelSmoothing, InvalidLabel) {
  EXPECT_THROW(ce_label_smoothing(Tensor<double>({1, 3}, 0.0), {3}, 0.1), IndexError);
}

TEST(GradCheck, SumIsExact) {
  std::mt19937_64 rng(7);
  const auto x = random_tensor({3, 4}, rng);
  EXPECT_LT(grad_check<double>([](const Tensor<double>& t) { return sum(t); }, x, 1e-6), 1e-8);
}

TEST(GradCheck, SoftmaxPickFirst) {
  std::mt19937_64 rng(8);
  const auto x = random_tensor({5}, rng);
  auto f = [](const Tensor<double>& t) {
    return sum(mul(softmax_last(t), Tensor<double>({5}, {1, 0, 0, 0, 0})));
  };
  EXPECT_LT(grad_check<double>(f, x, 1e-5), 1e-6);
}

TEST(GradCheck, EveryTensorOpBelowOneMicro) {
  for (const auto& r : run_grad_checks("tensor", 0)) EXPECT_LT(r.max_rel_error, 1e-6) << r.name;
}

TEST(GradCheck, CorruptionIsDetected) {
  GradCheckOptions opt;
  opt.corrupt = true;
  double worst = 0.0;
  for (const auto& r : run_grad_checks("tensor", 0, opt)) worst = std::max(worst, r.max_rel_error);
  EXPECT_GT(worst, 1e-2);
}

TEST(GradCheck, UnknownModuleRejected) { EXPECT_THROW(run_grad_checks("nope"), ConfigError); }

TEST(Serialize, RoundTripBothDtypes) {
  std::mt19937_64 rng(9);
  const auto d = random_tensor({2, 3, 4}, rng, false);
  std::stringstream ss;
  write_tensor(ss, d);
  const auto back = read_tensor<double>(ss);
  EXPECT_EQ(back.shape(), d.shape());
  EXPECT_EQ(oracle::values(back), oracle::values(d));

  const Tensor<float> f({3}, {1.5f, -2.25f, 3.0f});
  std::stringstream sf;
  write_tensor(sf, f);
  const std::string bytes = sf.str();
  ASSERT_GE(bytes.size(), 6u);
  EXPECT_EQ(bytes.substr(0, 4), "CDT1");
  EXPECT_EQ(static_cast<int>(bytes[4]), 0);
  EXPECT_EQ(static_cast<int>(bytes[5]), 1);
  EXPECT_EQ(bytes.size(), 4u + 1u + 1u + 8u + 3u * 4u);
  EXPECT_EQ(oracle::values(read_tensor<float>(sf)), oracle::values(f));
}

TEST(Serialize, RejectsBadInput) {
  std::stringstream bad("XXXX");
  EXPECT_THROW(read_tensor<float>(bad), ParseError);
  std::stringstream ss;
  write_tensor(ss, Tensor<float>({4}, 1.0f));
  std::string s = ss.str();
  s.resize(s.size() - 2);
  std::stringstream trunc(s);
  EXPECT_THROW(read_tensor<float>(trunc), ParseError);
}

TEST(Runtime, StrictModeGuardRestores) {
  const bool before = strict_mode();
  {
    StrictModeGuard g(true);
    EXPECT_TRUE(strict_mode());
  }
  EXPECT_EQ(strict_mode(), before);
}

TEST(Runtime, ValidationSurfacesNonFinite) {
  set_validation_mode(true);
  EXPECT_THROW(mul(Tensor<double>({1}, {std::numeric_limits<double>::infinity()}), Tensor<double>({1}, {0.0})), NumericError);
  set_validation_mode(false);
}

TEST(Runtime, NoGradGuardSkipsRecording) {
  const auto x = leaf({2}, {1, 2});
  Tensor<double> y;
  {
    NoGradGuard ng;
    y = mul(x, x);
  }
  EXPECT_FALSE(y.requires_grad());
}
