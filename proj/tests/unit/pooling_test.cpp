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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "rpdk/pooling.hpp"

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

double brute_legacy(const VoxelFeatureSet& v, std::size_t k) {
  const std::size_t rot = v.features.dim(1), n = v.features.dim(2);
  double best = 0.0;
  for (std::size_t j = 0; j < rot; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += v.features.at({k, j, v.rotations[j][i]});
    best = std::max(best, std::abs(s / static_cast<double>(n)));
  }
  return best;
}

std::vector<std::vector<std::size_t>> random_bijections(std::size_t count, std::size_t n, std::mt19937_64& rng) {
  std::vector<std::vector<std::size_t>> maps(count, std::vector<std::size_t>(n));
  for (std::size_t j = 0; j < count; ++j) {
    std::iota(maps[j].begin(), maps[j].end(), 0);
    if (j > 0) std::shuffle(maps[j].begin(), maps[j].end(), rng);
  }
  return maps;
}

const char* const kBuiltins[] = {"max", "avg", "lp", "soft"};

}  // namespace

TEST(PoolRegistry, BuiltinsRoundTrip) {
  PoolRegistry reg;
  for (const char* name : kBuiltins) {
    ASSERT_TRUE(reg.contains(name));
    EXPECT_EQ(reg.lookup(name).name, name);
  }
  EXPECT_EQ(&reg.lookup("max"), &reg.lookup("max"));
}

TEST(PoolRegistry, RegisterAndLookup) {
  PoolRegistry reg(false);
  EXPECT_TRUE(reg.names().empty());
  reg.register_pool(max_pool_fn());
  EXPECT_EQ(reg.lookup("max").reduce(std::vector<double>{1.0, 7.0, 3.0}), 7.0);
  EXPECT_EQ(error_of([&] { reg.register_pool(max_pool_fn()); }), Errc::DuplicateName);
  EXPECT_EQ(error_of([&] { (void)reg.lookup("median"); }), Errc::UnknownPoolFn);
}

TEST(PoolRegistry, GlobalAcceptsCustomFunction) {
  PoolFn minimum{"unit_min",
                 [](std::span<const double> v) { return *std::min_element(v.begin(), v.end()); },
                 [](std::span<const double> v, std::span<double> g) {
                   std::fill(g.begin(), g.end(), 0.0);
                   g[static_cast<std::size_t>(std::min_element(v.begin(), v.end()) - v.begin())] = 1.0;
                 },
                 [](std::size_t n) { return OpCounter{n, 0, 0, 0}; }};
  register_pool(minimum);
  Tensor img({1, 2, 2}, {4, 1, 3, 2});
  EXPECT_EQ(replaceable_pool_2d(img, PoolRegionSpec::spatial(2, 2, 2, 2), lookup_pool("unit_min")).value[0], 1.0);
  EXPECT_EQ(error_of([&] { register_pool(minimum); }), Errc::DuplicateName);
}

TEST(PoolFn, SoftOfZerosIsZero) {
  EXPECT_EQ(soft_pool_fn().reduce(std::vector<double>{0.0, 0.0, 0.0}), 0.0);
}

TEST(PoolFn, SingletonIsIdentity) {
  for (double v : {0.0, 0.25, 3.5, 17.0}) {
    for (const char* name : kBuiltins) EXPECT_NEAR(lookup_pool(name).reduce(std::vector<double>{v}), v, 1e-15) << name;
  }
  // The power mean only recovers non-negative singletons; negatives come back as |v|.
  for (const char* name : {"max", "avg", "soft"}) EXPECT_NEAR(lookup_pool(name).reduce(std::vector<double>{-2.5}), -2.5, 1e-15);
  EXPECT_NEAR(lookup_pool("lp").reduce(std::vector<double>{-2.5}), 2.5, 1e-15);
}

TEST(PoolFn, PermutationInvariant) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  std::vector<double> v(9);
  for (auto& x : v) x = u(rng);
  for (const char* name : kBuiltins) {
    const double base = lookup_pool(name).reduce(v);
    auto w = v;
    for (int rep = 0; rep < 5; ++rep) {
      std::shuffle(w.begin(), w.end(), rng);
      EXPECT_NEAR(lookup_pool(name).reduce(w), base, 1e-12) << name;
    }
  }
}

TEST(PoolFn, GradMasks) {
  const std::vector<double> v{1.0, 4.0, 4.0, 2.0};
  std::vector<double> g(4);
  avg_pool_fn().grad_mask(v, g);
  EXPECT_DOUBLE_EQ(std::accumulate(g.begin(), g.end(), 0.0), 1.0);
  max_pool_fn().grad_mask(v, g);
  EXPECT_EQ(g, (std::vector<double>{0.0, 1.0, 0.0, 0.0}));
}

TEST(PoolFn, GradMasksMatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.2, 2.0);
  std::vector<double> v(6);
  for (auto& x : v) x = u(rng);
  for (const char* name : kBuiltins) {
    const PoolFn& fn = lookup_pool(name);
    std::vector<double> g(v.size());
    fn.grad_mask(v, g);
    for (std::size_t i = 0; i < v.size(); ++i) {
      auto hi = v, lo = v;
      hi[i] += 1e-6;
      lo[i] -= 1e-6;
      EXPECT_NEAR(g[i], (fn.reduce(hi) - fn.reduce(lo)) / 2e-6, 1e-7) << name << " slot " << i;
    }
  }
}

TEST(LegacyPool, TwoFeatures) {
  VoxelFeatureSet v{Tensor({1, 1, 2}, {1.0, -3.0}), {{0, 1}}};
  EXPECT_EQ(legacy_pool(v).value[0], 1.0);
}

TEST(LegacyPool, ConstantVoxel) {
  VoxelFeatureSet v{Tensor({1, 3, 4}, -0.75), cyclic_rotations(3, 4)};
  EXPECT_EQ(legacy_pool(v).value[0], 0.75);
}

TEST(LegacyPool, MatchesBruteForce) {
  std::mt19937_64 rng(21);
  VoxelFeatureSet v{oracle::random_tensor({5, 4, 16}, rng), random_bijections(4, 16, rng)};
  const Tensor got = legacy_pool(v).value;
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(got[k], brute_legacy(v, k), 1e-14);
}

TEST(LegacyPool, OpCountFormula) {
  for (std::size_t n : {1u, 16u, 100u})
    for (std::size_t rot : {1u, 4u}) {
      VoxelFeatureSet v{Tensor({3, rot, n}, 0.5), cyclic_rotations(rot, n)};
      EXPECT_EQ(legacy_pool(v).ops.total(), 3 * (2 * rot * n + 3 * rot + 1));
    }
}

TEST(LegacyPool, Errors) {
  VoxelFeatureSet not_bijective{Tensor({1, 2, 3}), {{0, 1, 2}, {0, 0, 2}}};
  EXPECT_EQ(error_of([&] { (void)legacy_pool(not_bijective); }), Errc::InvalidSpec);
  VoxelFeatureSet not_identity{Tensor({1, 1, 2}), {{1, 0}}};
  EXPECT_EQ(error_of([&] { (void)legacy_pool(not_identity); }), Errc::InvalidSpec);
  VoxelFeatureSet empty{Tensor(), {}};
  EXPECT_EQ(error_of([&] { (void)legacy_pool(empty); }), Errc::EmptyVoxel);
}

TEST(RpLift, ShapeDataAndCost) {
  std::mt19937_64 rng(1);
  Tensor t = oracle::random_tensor({2, 3, 4, 4}, rng);
  auto lifted = rp_lift(t);
  EXPECT_EQ(lifted.value.shape(), (Shape{2, 3, 1, 4, 4}));
  EXPECT_EQ(lifted.value.values(), t.values());
  EXPECT_EQ(lifted.ops, OpCounter{});
  auto dropped = rp_drop(lifted.value);
  EXPECT_TRUE(bit_equal(dropped.value, t));
  EXPECT_EQ(dropped.ops, OpCounter{});
  EXPECT_EQ(error_of([] { (void)rp_lift(Tensor({2, 2, 2})); }), Errc::RankMismatch);
}

TEST(RpDrop, RequiresUnitLiftedAxis) {
  EXPECT_EQ(rp_drop(Tensor({2, 3, 1, 4, 4})).value.shape(), (Shape{2, 3, 4, 4}));
  EXPECT_EQ(error_of([] { (void)rp_drop(Tensor({2, 3, 2, 4, 4})); }), Errc::NonUnitLiftedAxis);
  EXPECT_EQ(error_of([] { (void)rp_drop(Tensor({2, 3, 4, 4})); }), Errc::RankMismatch);
}

TEST(RpPool, MaxAndAvgOfTwoByTwo) {
  Tensor t({1, 1, 1, 2, 2}, {1, 2, 3, 4});
  const auto spec = PoolRegionSpec::spatial(2, 2, 2, 2);
  EXPECT_EQ(rp_pool(t, spec, max_pool_fn()).value[0], 4.0);
  EXPECT_EQ(rp_pool(t, spec, avg_pool_fn()).value[0], 2.5);
}

TEST(RpPool, LpMatchesRegionEnumeration) {
  std::mt19937_64 rng(9);
  Tensor t = oracle::random_tensor({1, 2, 1, 6, 6}, rng);
  const Tensor got = rp_pool(t, PoolRegionSpec::spatial(2, 2, 2, 2), lp_pool_fn()).value;
  ASSERT_EQ(got.shape(), (Shape{1, 2, 1, 3, 3}));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t oy = 0; oy < 3; ++oy)
      for (std::size_t ox = 0; ox < 3; ++ox) {
        double sq = 0.0;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const double v = t.at({0, c, 0, 2 * oy + dy, 2 * ox + dx});
            sq += v * v;
          }
        EXPECT_NEAR(got.at({0, c, 0, oy, ox}), std::sqrt(sq / 4.0), 1e-14);
      }
}

TEST(RpPool, SpecErrors) {
  Tensor t({1, 1, 1, 3, 3});
  EXPECT_EQ(error_of([&] { (void)rp_pool(t, PoolRegionSpec::spatial(4, 1, 1, 1), max_pool_fn()); }),
            Errc::WindowTooLarge);
  EXPECT_EQ(error_of([&] { (void)rp_pool(t, PoolRegionSpec{{1}, {1}, {1}}, max_pool_fn()); }), Errc::InvalidSpec);
  EXPECT_EQ(error_of([&] { (void)rp_pool(t, PoolRegionSpec::spatial(0, 1, 1, 1), max_pool_fn()); }),
            Errc::InvalidSpec);
  EXPECT_EQ(error_of([&] { (void)rp_pool(Tensor({1, 3, 3}), PoolRegionSpec::spatial(1, 1, 1, 1), max_pool_fn()); }),
            Errc::RankMismatch);
}

TEST(RpPool, CeilModeKeepsPartialWindows) {
  Tensor t({1, 1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Tensor got = rp_pool(t, PoolRegionSpec::spatial(2, 2, 2, 2, true), avg_pool_fn()).value;
  ASSERT_EQ(got.shape(), (Shape{1, 1, 1, 2, 2}));
  EXPECT_EQ(got.values(), (std::vector<double>{3.0, 4.5, 7.5, 9.0}));
}

TEST(ReplaceablePool3d, UnitWindowIsIdentity) {
  std::mt19937_64 rng(2);
  Tensor t = oracle::random_tensor({2, 3, 4, 5}, rng);
  EXPECT_TRUE(bit_equal(replaceable_pool_3d(t, PoolRegionSpec::spatial(1, 1, 1, 1), max_pool_fn()).value, t));
}

TEST(ReplaceablePool3d, FullWindowCost) {
  // N_rot variants, each one full h x w region: N_rot * (1 + h*w + 1) primitive ops under max.
  const std::size_t rot = 4, h = 5, w = 6;
  Tensor t({1, rot, h, w}, 1.0);
  const auto run = replaceable_pool_3d(t, PoolRegionSpec::spatial(h, w, h, w), max_pool_fn());
  EXPECT_EQ(run.ops.total(), rot * (1 + h * w + 1));
}

TEST(ReplaceablePool, VoxelWorkloadCounts) {
  std::mt19937_64 rng(5);
  VoxelFeatureSet v{oracle::random_tensor({1, 4, 100}, rng), cyclic_rotations(4, 100)};
  const auto rp = replaceable_pool_voxels(v, max_pool_fn());
  const auto legacy = legacy_pool(v);
  EXPECT_EQ(rp.ops.total(), 408u);
  EXPECT_EQ(legacy.ops.total(), 813u);
  EXPECT_LE(static_cast<double>(rp.ops.total()) / static_cast<double>(legacy.ops.total()), 0.6);
}

TEST(ReplaceablePool, DegenerateVoxelMatchesLegacy) {
  // n = 1 and one rotation: the mean is the feature itself.
  for (double f : {0.0, 0.5, 2.25}) {
    VoxelFeatureSet v{Tensor({1, 1, 1}, f), cyclic_rotations(1, 1)};
    EXPECT_EQ(replaceable_pool_voxels(v, max_pool_fn()).value[0], legacy_pool(v).value[0]);
  }
}

TEST(ReplaceablePool, RatiosOnLargeRegions) {
  std::mt19937_64 rng(6);
  for (std::size_t n : {32u, 64u, 100u, 256u})
    for (std::size_t rot : {2u, 4u, 8u}) {
      VoxelFeatureSet v{oracle::random_tensor({16, rot, n}, rng), cyclic_rotations(rot, n)};
      const auto rp = replaceable_pool_voxels(v, max_pool_fn());
      const auto legacy = legacy_pool(v);
      EXPECT_LE(static_cast<double>(rp.ops.total()) / static_cast<double>(legacy.ops.total()), 0.6);
      EXPECT_LE(static_cast<double>(rp.peak_bytes) / static_cast<double>(legacy.peak_bytes), 2.0 / 3.0 + 0.1);
    }
}

TEST(ReplaceablePool2d, UnitWindowIsIdentity) {
  std::mt19937_64 rng(7);
  Tensor img = oracle::random_tensor({3, 4, 4}, rng);
  EXPECT_TRUE(bit_equal(replaceable_pool_2d(img, PoolRegionSpec::spatial(1, 1, 1, 1), avg_pool_fn()).value, img));
}

TEST(ReplaceablePool2d, FullWindowOfOneHot) {
  Tensor img({1, 4, 5});
  img.at({0, 2, 3}) = 6.5;
  const Tensor got = replaceable_pool_2d(img, PoolRegionSpec::spatial(4, 5, 4, 5), max_pool_fn()).value;
  ASSERT_EQ(got.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(got[0], 6.5);
}

TEST(ReplaceablePool2d, AvgMatchesDirectPooling) {
  std::mt19937_64 rng(8);
  Tensor img = oracle::random_tensor({2, 6, 8}, rng);
  const Tensor got = replaceable_pool_2d(img, PoolRegionSpec::spatial(2, 2, 2, 2), avg_pool_fn()).value;
  ASSERT_EQ(got.shape(), (Shape{2, 3, 4}));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 4; ++x) {
        const double want = (img.at({c, 2 * y, 2 * x}) + img.at({c, 2 * y, 2 * x + 1}) +
                             img.at({c, 2 * y + 1, 2 * x}) + img.at({c, 2 * y + 1, 2 * x + 1})) /
                            4.0;
        EXPECT_NEAR(got.at({c, y, x}), want, 1e-15);
      }
}

TEST(ReplaceablePool2d, BackwardRoutesByMask) {
  Tensor img({1, 2, 2}, {1, 5, 3, 2});
  const auto spec = PoolRegionSpec::spatial(2, 2, 2, 2);
  const Tensor up({1, 1, 1}, 1.0);
  EXPECT_EQ(replaceable_pool_2d_backward(img, spec, max_pool_fn(), up).values(),
            (std::vector<double>{0, 1, 0, 0}));
  EXPECT_EQ(replaceable_pool_2d_backward(img, spec, avg_pool_fn(), up).values(),
            (std::vector<double>{0.25, 0.25, 0.25, 0.25}));
}

TEST(PoolLayer, GradCheckEveryBuiltin) {
  for (const char* name : kBuiltins) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      std::mt19937_64 rng(seed);
      PoolLayer layer(lookup_pool(name), PoolRegionSpec::spatial(2, 2, 2, 2, true));
      auto report = grad_check(layer, oracle::random_tensor({2, 5, 5}, rng, 0.1, 2.0));
      EXPECT_LT(report.max_rel_err, 1e-4) << name << " seed " << seed;
    }
  }
}
