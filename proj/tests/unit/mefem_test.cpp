// Copyright 2026 The rpdk Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <utility>

#include "oracles.hpp"
#include "rpdk/mefem.hpp"

using namespace rpdk;

namespace {

template <class F>
Errc error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no rpdk::Error raised";
  return Errc::IoError;
}

DeformableLayer zero_offset_layer(const Tensor& weights, ConvParams params) {
  const std::size_t taps = weights.dim(2) * weights.dim(3);
  return DeformableLayer(weights, Tensor({2 * taps, weights.dim(1), weights.dim(2), weights.dim(3)}),
                         Tensor({2 * taps}), params);
}

DeformableLayer constant_offset_layer(const Tensor& weights, ConvParams params, double dy, double dx) {
  const std::size_t taps = weights.dim(2) * weights.dim(3);
  Tensor bias({2 * taps});
  for (std::size_t n = 0; n < taps; ++n) {
    bias[2 * n] = dy;
    bias[2 * n + 1] = dx;
  }
  return DeformableLayer(weights, Tensor({2 * taps, weights.dim(1), weights.dim(2), weights.dim(3)}), bias, params);
}

// Smooth field: products of sinusoids with period 30 to 60 cells.
Tensor smooth_map(std::size_t c, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor m({c, h, w});
  for (std::size_t k = 0; k < c; ++k) {
    const double a = 0.1 + 0.1 * u(rng), b = 0.1 + 0.1 * u(rng), p = 6.28 * u(rng);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        m.at({k, y, x}) = std::sin(a * static_cast<double>(x) + p) * std::cos(b * static_cast<double>(y));
  }
  return m;
}

std::set<std::size_t> support(const Tensor& g) {
  std::set<std::size_t> s;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g[i] != 0.0) s.insert(i);
  return s;
}

}  // namespace

TEST(Bilinear, IntegerPointsAreExact) {
  std::mt19937_64 rng(1);
  const Tensor m = oracle::random_tensor({2, 4, 5}, rng);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 5; ++x) {
      const auto v = bilinear_sample(m, static_cast<double>(x), static_cast<double>(y));
      EXPECT_EQ(v[0], m.at({0, y, x}));
      EXPECT_EQ(v[1], m.at({1, y, x}));
    }
}

TEST(Bilinear, CentreOfFourCells) {
  EXPECT_EQ(bilinear_sample(Tensor({1, 2, 2}, {0, 1, 2, 3}), 0.5, 0.5)[0], 1.5);
}

TEST(Bilinear, MatchesTwoAxisLerp) {
  std::mt19937_64 rng(2);
  const Tensor m = oracle::random_tensor({3, 6, 7}, rng);
  std::uniform_real_distribution<double> px(-1.5, 7.5), py(-1.5, 6.5);
  for (int rep = 0; rep < 200; ++rep) {
    const double x = px(rng), y = py(rng);
    const auto v = bilinear_sample(m, x, y);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(v[c], oracle::lerp2(m, c, x, y), 1e-14) << x << "," << y;
  }
}

TEST(Bilinear, OutsideIsZero) {
  const Tensor m({1, 3, 3}, 1.0);
  EXPECT_EQ(bilinear_sample(m, -1.0, 1.0)[0], 0.0);
  EXPECT_EQ(bilinear_sample(m, 1.0, 3.0)[0], 0.0);
  EXPECT_DOUBLE_EQ(bilinear_sample(m, -0.25, 1.0)[0], 0.75);
}

TEST(DeformConv, ZeroOffsetsEqualConv2d) {
  std::mt19937_64 rng(3);
  for (ConvParams p : {ConvParams{1, 0}, ConvParams{1, 1}, ConvParams{2, 1}}) {
    const Tensor w = oracle::random_tensor({3, 2, 3, 3}, rng);
    const Tensor x = oracle::random_tensor({2, 7, 6}, rng);
    EXPECT_LT(max_abs_diff(deform_conv(zero_offset_layer(w, p), x), conv2d(x, w, p)), 1e-12);
  }
}

TEST(DeformConv, StandardInitStartsAsConv) {
  std::mt19937_64 rng(4);
  const DeformableLayer layer = DeformableLayer::standard_init(2, 4, 3, 3, {1, 1}, rng);
  const Tensor x = oracle::random_tensor({2, 5, 5}, rng);
  EXPECT_LT(max_abs_diff(layer.forward(x), conv2d(x, layer.weights(), {1, 1})), 1e-12);
  const Tensor off = layer.offsets(x);
  EXPECT_EQ(off.shape(), (Shape{18, 5, 5}));
  for (double v : off.values()) EXPECT_EQ(v, 0.0);
}

TEST(DeformConv, ColumnOffsetEqualsShiftedInput) {
  std::mt19937_64 rng(5);
  const Tensor w = oracle::random_tensor({2, 2, 3, 3}, rng);
  const Tensor x = oracle::random_tensor({2, 6, 6}, rng);
  Tensor shifted({2, 6, 6});
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t col = 0; col + 1 < 6; ++col) shifted.at({c, y, col}) = x.at({c, y, col + 1});
  // no padding: a padded left border would read zeros from `shifted` but x(0) through the offset
  const ConvParams p{1, 0};
  EXPECT_LT(max_abs_diff(deform_conv(constant_offset_layer(w, p, 0.0, 1.0), x), conv2d(shifted, w, p)), 1e-12);
}

TEST(DeformConv, GradCheckOffIntegerSamples) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    std::mt19937_64 rng(seed);
    DeformableLayer layer(oracle::random_tensor({3, 2, 3, 3}, rng), oracle::random_tensor({18, 2, 3, 3}, rng, -0.05, 0.05),
                          oracle::random_tensor({18}, rng, 0.2, 0.4), {1, 1});
    const auto report = grad_check(layer, oracle::random_tensor({2, 6, 6}, rng));
    EXPECT_LT(report.max_rel_err, 1e-3) << "seed " << seed;
    EXPECT_EQ(report.entries.size(), 4u);
  }
}

TEST(DeformConv, ConstructorChecksOffsetChannels) {
  EXPECT_EQ(error_of([] { DeformableLayer(Tensor({1, 1, 3, 3}), Tensor({9, 1, 3, 3}), Tensor({9}), {}); }),
            Errc::ShapeMismatch);
  const DeformableLayer layer = zero_offset_layer(Tensor({1, 2, 3, 3}, 1.0), {});
  EXPECT_EQ(error_of([&] { (void)layer.forward(Tensor({3, 5, 5})); }), Errc::ShapeMismatch);
}

TEST(RroiPool, SingleCellRoi) {
  std::mt19937_64 rng(6);
  const Tensor m = oracle::random_tensor({2, 4, 5}, rng);
  const Tensor out = rroi_pool(m, Roi{3.0, 1.0, 1.0, 1.0, 0}, 1, "max");
  ASSERT_EQ(out.shape(), (Shape{2, 1, 1}));
  EXPECT_EQ(out[0], m.at({0, 1, 3}));
  EXPECT_EQ(out[1], m.at({1, 1, 3}));
}

TEST(RroiPool, ConstantMapForEveryFunction) {
  const Tensor m({1, 6, 6}, 0.75);
  for (const char* fn : {"max", "avg", "lp", "soft"})
    for (std::size_t g : {1u, 2u, 3u}) {
      const Tensor out = rroi_pool(m, Roi{0.5, 1.2, 3.7, 2.9, 0}, g, fn);
      for (double v : out.values()) EXPECT_NEAR(v, 0.75, 1e-15) << fn;
    }
}

TEST(RroiPool, OutputShapeIndependentOfRoiSize) {
  std::mt19937_64 rng(7);
  const Tensor m = oracle::random_tensor({3, 10, 10}, rng);
  for (double size : {1.0, 2.5, 6.0, 9.0})
    EXPECT_EQ(rroi_pool(m, Roi{0.0, 0.0, size, size, 0}, 3, "avg").shape(), (Shape{3, 3, 3}));
}

TEST(RroiPool, AvgAgreesWithDenseSampling) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> pos(0.0, 4.0), ext(3.0, 7.0);
  for (int rep = 0; rep < 20; ++rep) {
    const Tensor m = smooth_map(2, 12, 12, rng);
    const Roi roi{pos(rng), pos(rng), ext(rng), ext(rng), 0};
    const std::size_t g = 2;
    const Tensor got = rroi_pool(m, roi, g, "avg");
    const double bw = (roi.w - 1.0) / g, bh = (roi.h - 1.0) / g;
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t gy = 0; gy < g; ++gy)
        for (std::size_t gx = 0; gx < g; ++gx) {
          double acc = 0.0;
          for (int sy = 0; sy < 10; ++sy)
            for (int sx = 0; sx < 10; ++sx)
              acc += oracle::lerp2(m, c, roi.x + (gx + (sx + 0.5) / 10.0) * bw, roi.y + (gy + (sy + 0.5) / 10.0) * bh);
          EXPECT_NEAR(got.at({c, gy, gx}), acc / 100.0, 0.05);
        }
  }
}

TEST(RroiPool, Errors) {
  const Tensor m({1, 4, 4});
  EXPECT_EQ(error_of([&] { (void)rroi_pool(m, Roi{0, 0, 0.0, 2.0, 0}, 1, "max"); }), Errc::DegenerateRoi);
  EXPECT_EQ(error_of([&] { (void)rroi_pool(m, Roi{0, 0, 2.0, -1.0, 0}, 1, "max"); }), Errc::DegenerateRoi);
  EXPECT_EQ(error_of([&] { (void)rroi_pool(m, Roi{}, 1, "no_such_pool"); }), Errc::UnknownPoolFn);
  EXPECT_EQ(error_of([&] { (void)rroi_pool(m, Roi{}, 0, "max"); }), Errc::InvalidHyperparam);
}

TEST(RroiPool, GradCheck) {
  for (std::uint64_t seed : {1u, 2u, 3u})
    for (const char* fn : {"max", "avg", "soft"}) {
      std::mt19937_64 rng(seed);
      RroiPoolLayer layer(Roi{0.7, 1.3, 3.6, 3.2, 0}, 2, lookup_pool(fn));
      EXPECT_LT(grad_check(layer, oracle::random_tensor({2, 6, 6}, rng)).max_rel_err, 1e-3) << fn;
    }
}

TEST(AssignLevel, ReferenceBoundaries) {
  EXPECT_EQ(assign_level(Roi{0, 0, 224, 224, 0}, 4), 4);
  EXPECT_EQ(assign_level(Roi{0, 0, 448, 448, 0}, 4), 5);
  EXPECT_EQ(assign_level(Roi{0, 0, 100, 50, 0}, 4), 2);
  EXPECT_EQ(assign_level(Roi{0, 0, 8, 8, 0}, 4), -1);
  EXPECT_EQ(assign_level(Roi{0, 0, 8, 8, 0}, 4, 224.0, 4), 0);
  EXPECT_EQ(assign_level(Roi{0, 0, 4000, 4000, 0}, 4, 224.0, 4), 3);
  EXPECT_EQ(error_of([] { (void)assign_level(Roi{0, 0, 0.0, 10.0, 0}, 4); }), Errc::DegenerateRoi);
}

TEST(AssignLevel, MonotoneAndDoublingAddsOne) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(2.0, 900.0);
  for (int rep = 0; rep < 200; ++rep) {
    const double w = u(rng), h = u(rng);
    const int base = assign_level(Roi{0, 0, w, h, 0}, 4);
    EXPECT_EQ(assign_level(Roi{0, 0, 2 * w, 2 * h, 0}, 4), base + 1);
    EXPECT_GE(assign_level(Roi{0, 0, w * 1.3, h, 0}, 4), base);
  }
}

TEST(Pyramid, LevelsHalveAndWindowsDouble) {
  std::mt19937_64 rng(10);
  const FeaturePyramid pyr = build_pyramid(oracle::random_tensor({2, 9, 8}, rng), 4, avg_pool_fn());
  ASSERT_EQ(pyr.levels.size(), 4u);
  EXPECT_EQ(pyr.levels[1].shape(), (Shape{2, 5, 4}));
  EXPECT_EQ(pyr.levels[2].shape(), (Shape{2, 3, 2}));
  EXPECT_EQ(pyr.levels[3].shape(), (Shape{2, 2, 1}));
  for (std::size_t l = 0; l + 1 < 4; ++l) EXPECT_EQ(pyr.window(l + 1), 2 * pyr.window(l));
}

TEST(Fuse, SingleLevelEqualsRroiPool) {
  std::mt19937_64 rng(11);
  const Tensor m = oracle::random_tensor({2, 8, 8}, rng);
  const FeaturePyramid pyr = build_pyramid(m, 1, avg_pool_fn());
  const Roi roi{1.2, 0.7, 4.4, 5.1, 0};
  const Tensor fused = fuse_pyramid(pyr, {roi}, FusionConfig{2, 4, 224.0}, max_pool_fn());
  EXPECT_LT(max_abs_diff(fused.reshape({2, 2, 2}), rroi_pool(m, roi, 2, max_pool_fn())), 1e-12);
}

TEST(Fuse, ConstantPyramidGivesConstant) {
  const FeaturePyramid pyr = build_pyramid(Tensor({1, 16, 16}, -1.25), 4, avg_pool_fn());
  // every ROI stays inside the span of cell centres at both of its levels
  std::vector<Roi> rois{{1, 1, 3, 3, 0}, {4.5, 2.5, 9, 7, 0}, {4, 4, 8, 8, 0}};
  for (const Roi& r : rois) {
    for (int l : fusion_levels(pyr, r, FusionConfig{2, 2, 8.0})) {
      const Roi s = roi_at_level(r, l);
      const double last = static_cast<double>(pyr.levels[l].dim(2)) - 1.0;
      ASSERT_GE(s.x, 0.0);
      ASSERT_LE(s.x + s.w - 1.0, last);
    }
  }
  const Tensor fused = fuse_pyramid(pyr, rois, FusionConfig{2, 2, 8.0}, max_pool_fn());
  EXPECT_EQ(fused.shape(), (Shape{3, 1, 2, 2}));
  for (double v : fused.values()) EXPECT_NEAR(v, -1.25, 1e-15);
}

TEST(Fuse, TwoLevelMeanOfPools) {
  std::mt19937_64 rng(12);
  const FeaturePyramid pyr = build_pyramid(oracle::random_tensor({2, 8, 8}, rng), 2, avg_pool_fn());
  const Roi roi{1.0, 2.0, 5.0, 4.0, 0};
  const FusionConfig cfg{2, 0, 224.0};
  ASSERT_EQ(fusion_levels(pyr, roi, cfg), (std::vector<int>{0, 1}));
  const Tensor a = rroi_pool(pyr.levels[0], roi, 2, max_pool_fn());
  // level-1 cell j averages level-0 cells 2j and 2j+1, so its centre sits at 2j + 0.5
  const Tensor b = rroi_pool(pyr.levels[1], Roi{0.25, 0.75, 3.0, 2.5, 1}, 2, max_pool_fn());
  const Tensor fused = fuse_pyramid(pyr, {roi}, cfg, max_pool_fn());
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(fused[i], 0.5 * (a[i] + b[i]), 1e-15);
}

TEST(Fuse, EmptyRoiList) {
  const FeaturePyramid pyr = build_pyramid(Tensor({1, 4, 4}, 1.0), 2, avg_pool_fn());
  EXPECT_EQ(fuse_pyramid(pyr, {}, FusionConfig{}, max_pool_fn()).size(), 0u);
}

TEST(Fuse, MultiScaleLayerGradCheck) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    std::mt19937_64 rng(seed);
    MultiScaleConfig cfg;
    cfg.depth = 3;
    cfg.anchor = 3.3;
    cfg.fusion = FusionConfig{2, 1, 6.0};
    MultiScaleRoiLayer layer(cfg);
    const Tensor x = oracle::random_tensor({2, 6, 6}, rng);
    EXPECT_EQ(layer.forward(x).shape(), (Shape{10, 6, 6}));
    EXPECT_LT(grad_check(layer, x).max_rel_err, 1e-3);
  }
}

TEST(EAConv, IdentityBlockGivesGlobalMax) {
  std::mt19937_64 rng(13);
  const Tensor eye({2, 2, 1, 1}, {1, 0, 0, 1});
  // full-extent ROI on a 2x2 map: the four bin corners are the four cells
  EAConvBlock small{zero_offset_layer(eye, {}), zero_offset_layer(eye, {}), Roi{0, 0, 2, 2, 0}, 1, max_pool_fn()};
  const Tensor x = oracle::random_tensor({2, 2, 2}, rng);
  const Tensor out = eaconv(small, x);
  ASSERT_EQ(out.shape(), (Shape{2, 1, 1}));
  EXPECT_EQ(out[0], std::max({x[0], x[1], x[2], x[3]}));
  EXPECT_EQ(out[1], std::max({x[4], x[5], x[6], x[7]}));
  // larger map: unit bins put a corner on every cell, the bin maxima cover the map
  EAConvBlock large{zero_offset_layer(eye, {}), zero_offset_layer(eye, {}), Roi{0, 0, 6, 6, 0}, 5, max_pool_fn()};
  const Tensor y = oracle::random_tensor({2, 6, 6}, rng);
  const Tensor bins = eaconv(large, y);
  for (std::size_t c = 0; c < 2; ++c) {
    double want = -1e300, got = -1e300;
    for (std::size_t i = 0; i < 36; ++i) want = std::max(want, y[c * 36 + i]);
    for (std::size_t i = 0; i < 25; ++i) got = std::max(got, bins[c * 25 + i]);
    EXPECT_EQ(got, want);
  }
}

TEST(EAConv, ZeroInputZeroOutput) {
  std::mt19937_64 rng(14);
  EAConvBlock block{DeformableLayer::standard_init(1, 2, 3, 3, {1, 1}, rng),
                    DeformableLayer::standard_init(2, 2, 3, 3, {1, 1}, rng), Roi{1, 1, 3, 3, 0}, 2, avg_pool_fn()};
  const Tensor out = eaconv(block, Tensor({1, 5, 5}));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(EAConv, EqualsExplicitComposition) {
  std::mt19937_64 rng(15);
  DeformableLayer a(oracle::random_tensor({3, 2, 3, 3}, rng), oracle::random_tensor({18, 2, 3, 3}, rng, -0.1, 0.1),
                    oracle::random_tensor({18}, rng, -0.5, 0.5), {1, 1});
  DeformableLayer b(oracle::random_tensor({2, 3, 3, 3}, rng), oracle::random_tensor({18, 3, 3, 3}, rng, -0.1, 0.1),
                    oracle::random_tensor({18}, rng, -0.5, 0.5), {1, 1});
  const Roi roi{0.4, 1.1, 4.2, 3.3, 0};
  const Tensor x = oracle::random_tensor({2, 7, 7}, rng);
  const Tensor manual = rroi_pool(deform_conv(b, deform_conv(a, x)), roi, 2, soft_pool_fn());
  EXPECT_TRUE(bit_equal(eaconv(EAConvBlock{a, b, roi, 2, soft_pool_fn()}, x), manual));
}

TEST(EAConv, GradCheck) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    std::mt19937_64 rng(seed);
    DeformableLayer a(oracle::random_tensor({2, 1, 3, 3}, rng), oracle::random_tensor({18, 1, 3, 3}, rng, -0.05, 0.05),
                      oracle::random_tensor({18}, rng, 0.2, 0.4), {1, 1});
    DeformableLayer b(oracle::random_tensor({2, 2, 3, 3}, rng), oracle::random_tensor({18, 2, 3, 3}, rng, -0.05, 0.05),
                      oracle::random_tensor({18}, rng, 0.2, 0.4), {1, 1});
    EAConvLayer layer(EAConvBlock{a, b, Roi{0.6, 1.3, 3.7, 3.2, 0}, 2, avg_pool_fn()});
    const auto report = grad_check(layer, oracle::random_tensor({1, 6, 6}, rng));
    EXPECT_LT(report.max_rel_err, 1e-3);
    EXPECT_EQ(report.entries.size(), 7u);
  }
}

TEST(EAConv, OffsetsExtendReceptiveField) {
  // One output element, gradient support on the input: outward tap offsets
  // (a dilation the offset predictor can learn) must reach strictly further.
  std::mt19937_64 rng(16);
  const Tensor w1 = oracle::random_tensor({1, 1, 3, 3}, rng, 0.1, 1.0);
  const Tensor w2 = oracle::random_tensor({1, 1, 3, 3}, rng, 0.1, 1.0);
  Tensor outward({18});
  for (std::size_t ky = 0; ky < 3; ++ky)
    for (std::size_t kx = 0; kx < 3; ++kx) {
      outward[2 * (ky * 3 + kx)] = 0.5 * (static_cast<double>(ky) - 1.0);
      outward[2 * (ky * 3 + kx) + 1] = 0.5 * (static_cast<double>(kx) - 1.0);
    }
  const ConvParams p{1, 1};
  const Roi centre{7.0, 7.0, 1.0, 1.0, 0};
  const Tensor x = oracle::random_tensor({1, 15, 15}, rng, 0.5, 1.0);
  EAConvLayer plain(EAConvBlock{zero_offset_layer(w1, p), zero_offset_layer(w2, p), centre, 1, max_pool_fn()});
  EAConvLayer deformed(EAConvBlock{DeformableLayer(w1, Tensor({18, 1, 3, 3}), outward, p),
                                   DeformableLayer(w2, Tensor({18, 1, 3, 3}), outward, p), centre, 1,
                                   max_pool_fn()});
  const auto base = support(plain.backward(x, Tensor({1, 1, 1}, 1.0)).d_input);
  const auto wide = support(deformed.backward(x, Tensor({1, 1, 1}, 1.0)).d_input);
  EXPECT_EQ(base.size(), 25u);
  EXPECT_GT(wide.size(), base.size());
  for (std::size_t i : base) EXPECT_TRUE(wide.contains(i)) << i;
}
