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

#include "rpdk/pooling.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>

#include "rpdk/simd/kernels.hpp"

namespace rpdk {

PoolFn max_pool_fn() {
  PoolFn fn;
  fn.name = "max";
  fn.reduce = [](std::span<const double> v) {
    double best;
    std::size_t where;
    simd::active().max_first(v.data(), v.size(), &best, &where);
    return best;
  };
  fn.grad_mask = [](std::span<const double> v, std::span<double> mask) {
    double best;
    std::size_t where;
    simd::active().max_first(v.data(), v.size(), &best, &where);
    std::fill(mask.begin(), mask.end(), 0.0);
    mask[where] = 1.0;
  };
  fn.cost = [](std::size_t n) { return OpCounter{.compares = n}; };
  return fn;
}

PoolFn avg_pool_fn() {
  PoolFn fn;
  fn.name = "avg";
  fn.reduce = [](std::span<const double> v) {
    return simd::active().sum(v.data(), v.size()) / static_cast<double>(v.size());
  };
  fn.grad_mask = [](std::span<const double> v, std::span<double> mask) {
    std::fill(mask.begin(), mask.end(), 1.0 / static_cast<double>(v.size()));
  };
  fn.cost = [](std::size_t n) { return OpCounter{.adds = n, .multiplies = 1}; };
  return fn;
}

PoolFn lp_pool_fn() {
  PoolFn fn;
  fn.name = "lp";
  fn.reduce = [](std::span<const double> v) {
    return std::sqrt(simd::active().dot(v.data(), v.data(), v.size()) / static_cast<double>(v.size()));
  };
  fn.grad_mask = [](std::span<const double> v, std::span<double> mask) {
    const double n = static_cast<double>(v.size());
    const double r = std::sqrt(simd::active().dot(v.data(), v.data(), v.size()) / n);
    for (std::size_t i = 0; i < v.size(); ++i) mask[i] = r > 0.0 ? v[i] / (n * r) : 0.0;
  };
  fn.cost = [](std::size_t n) { return OpCounter{.adds = n, .multiplies = n + 2}; };
  return fn;
}

PoolFn soft_pool_fn() {
  PoolFn fn;
  fn.name = "soft";
  fn.reduce = [](std::span<const double> v) {
    const double m = *std::max_element(v.begin(), v.end());
    double num = 0.0, den = 0.0;
    for (double x : v) {
      const double w = std::exp(x - m);
      num += w * x;
      den += w;
    }
    return num / den;
  };
  fn.grad_mask = [](std::span<const double> v, std::span<double> mask) {
    const double m = *std::max_element(v.begin(), v.end());
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      mask[i] = std::exp(v[i] - m);
      num += mask[i] * v[i];
      den += mask[i];
    }
    const double out = num / den;
    for (std::size_t i = 0; i < v.size(); ++i) mask[i] = mask[i] / den * (1.0 + v[i] - out);
  };
  fn.cost = [](std::size_t n) { return OpCounter{.compares = n, .adds = 2 * n, .multiplies = 2 * n + 1}; };
  return fn;
}

PoolRegistry& PoolRegistry::global() {
  static PoolRegistry registry(true);
  return registry;
}

PoolRegistry::PoolRegistry(bool with_builtins) {
  if (with_builtins) {
    for (auto fn : {max_pool_fn(), avg_pool_fn(), lp_pool_fn(), soft_pool_fn()}) register_pool(std::move(fn));
  }
}

void PoolRegistry::register_pool(PoolFn fn) {
  require(!fn.name.empty(), Errc::InvalidSpec, "pool function needs a name");
  require(static_cast<bool>(fn.reduce) && static_cast<bool>(fn.grad_mask), Errc::InvalidSpec,
          "pool function '" + fn.name + "' needs reduce and grad_mask");
  if (!fn.cost) fn.cost = [](std::size_t n) { return OpCounter{.adds = n}; };
  std::unique_lock lock(mutex_);
  if (fns_.contains(fn.name)) fail(Errc::DuplicateName, "pool function '" + fn.name + "' already registered");
  auto name = fn.name;
  fns_.emplace(std::move(name), std::make_unique<const PoolFn>(std::move(fn)));
}

const PoolFn& PoolRegistry::lookup(std::string_view name) const {
  std::shared_lock lock(mutex_);
  auto it = fns_.find(name);
  if (it == fns_.end()) fail(Errc::UnknownPoolFn, "no pool function named '" + std::string(name) + "'");
  return *it->second;
}

bool PoolRegistry::contains(std::string_view name) const {
  std::shared_lock lock(mutex_);
  return fns_.find(name) != fns_.end();
}

std::vector<std::string> PoolRegistry::names() const {
  std::shared_lock lock(mutex_);
  std::vector<std::string> out;
  for (const auto& [name, fn] : fns_) out.push_back(name);
  return out;
}

void register_pool(PoolFn fn) { PoolRegistry::global().register_pool(std::move(fn)); }
const PoolFn& lookup_pool(std::string_view name) { return PoolRegistry::global().lookup(name); }

std::vector<std::vector<std::size_t>> cyclic_rotations(std::size_t count, std::size_t n) {
  std::vector<std::vector<std::size_t>> maps(count, std::vector<std::size_t>(n));
  for (std::size_t j = 0; j < count; ++j)
    for (std::size_t i = 0; i < n; ++i) maps[j][i] = (i + j) % n;
  return maps;
}

namespace {

constexpr std::uint64_t kDouble = sizeof(double);

void validate_voxels(const VoxelFeatureSet& v) {
  if (v.features.size() == 0) fail(Errc::EmptyVoxel, "voxel set has no point features");
  require(v.features.rank() == 3, Errc::RankMismatch, "voxel features must be [K, N_rot, n]");
  const std::size_t rot = v.features.dim(1), n = v.features.dim(2);
  require(v.rotations.size() == rot, Errc::InvalidSpec, "one rotation map per rotation variant required");
  std::vector<char> seen(n);
  for (std::size_t j = 0; j < rot; ++j) {
    const auto& map = v.rotations[j];
    require(map.size() == n, Errc::InvalidSpec, "rotation map length differs from n");
    std::fill(seen.begin(), seen.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      require(map[i] < n && !seen[map[i]], Errc::InvalidSpec, "rotation map is not a bijection");
      seen[map[i]] = 1;
      if (j == 0) require(map[i] == i, Errc::InvalidSpec, "rotation 0 must be the identity");
    }
  }
}

struct AxisPlan {
  std::size_t extent = 1, window = 1, stride = 1, out = 1;
};

std::array<AxisPlan, 3> plan_axes(const Shape& lifted, const PoolRegionSpec& spec) {
  require(lifted.size() == 5, Errc::RankMismatch, "rp_pool expects a rank-5 [N,C,D,H,W] tensor");
  require(spec.window.size() == spec.axes.size() && spec.stride.size() == spec.axes.size(), Errc::InvalidSpec,
          "pool spec needs one window and stride per pooled axis");
  std::array<AxisPlan, 3> plan;
  for (std::size_t a = 0; a < 3; ++a) plan[a].extent = lifted[a + 2];
  std::array<bool, 3> used{};
  for (std::size_t i = 0; i < spec.axes.size(); ++i) {
    const std::size_t axis = spec.axes[i];
    require(axis >= 2 && axis <= 4, Errc::InvalidSpec, "pooled axes must be D, H or W (2..4)");
    require(!used[axis - 2], Errc::InvalidSpec, "pooled axis listed twice");
    require(spec.window[i] >= 1 && spec.stride[i] >= 1, Errc::InvalidSpec, "window and stride must be >= 1");
    used[axis - 2] = true;
    plan[axis - 2].window = spec.window[i];
    plan[axis - 2].stride = spec.stride[i];
  }
  for (auto& p : plan) {
    if (p.window > p.extent) {
      require(spec.ceil_mode, Errc::WindowTooLarge,
              "window " + std::to_string(p.window) + " exceeds extent " + std::to_string(p.extent));
      p.out = 1;
    } else if (spec.ceil_mode) {
      p.out = (p.extent - p.window + p.stride - 1) / p.stride + 1;
    } else {
      p.out = (p.extent - p.window) / p.stride + 1;
    }
  }
  return plan;
}

struct Region {
  std::size_t d0, d1, h0, h1, w0, w1;
  std::size_t count() const { return (d1 - d0) * (h1 - h0) * (w1 - w0); }
};

Region region_at(const std::array<AxisPlan, 3>& p, std::size_t od, std::size_t oh, std::size_t ow) {
  auto span = [](const AxisPlan& a, std::size_t o) {
    const std::size_t lo = o * a.stride;
    return std::pair{lo, std::min(lo + a.window, a.extent)};
  };
  auto [d0, d1] = span(p[0], od);
  auto [h0, h1] = span(p[1], oh);
  auto [w0, w1] = span(p[2], ow);
  return {d0, d1, h0, h1, w0, w1};
}

bool contiguous(const Region& r, const std::array<AxisPlan, 3>& p) {
  const bool full_w = r.w1 - r.w0 == p[2].extent;
  const bool full_h = r.h1 - r.h0 == p[1].extent;
  return (r.d1 - r.d0 == 1 && r.h1 - r.h0 == 1) || (r.d1 - r.d0 == 1 && full_w) || (full_w && full_h);
}

std::size_t region_origin(const Region& r, const std::array<AxisPlan, 3>& p) {
  return (r.d0 * p[1].extent + r.h0) * p[2].extent + r.w0;
}

// Calls visit(flat_index, position_in_region) in row-major region order.
template <class Visit>
void for_each_in_region(const Region& r, const std::array<AxisPlan, 3>& p, Visit&& visit) {
  std::size_t k = 0;
  for (std::size_t d = r.d0; d < r.d1; ++d)
    for (std::size_t h = r.h0; h < r.h1; ++h)
      for (std::size_t w = r.w0; w < r.w1; ++w) visit((d * p[1].extent + h) * p[2].extent + w, k++);
}

}  // namespace

PoolRun legacy_pool(const VoxelFeatureSet& voxels) {
  validate_voxels(voxels);
  const std::size_t k_count = voxels.features.dim(0);
  const std::size_t rot = voxels.features.dim(1);
  const std::size_t n = voxels.features.dim(2);
  const double inv_n = 1.0 / static_cast<double>(n);

  PoolRun run{Tensor({k_count}), {}, 0};
  AllocTracker tracker;
  TrackedBytes output_bytes(tracker, k_count * kDouble);
  OpCounter& ops = run.ops;

  for (std::size_t k = 0; k < k_count; ++k) {
    const double* voxel = &voxels.features[k * rot * n];
    std::vector<double> rotated(rot * n);
    TrackedBytes rotated_bytes(tracker, rotated.size() * kDouble);
    for (std::size_t j = 0; j < rot; ++j)
      for (std::size_t i = 0; i < n; ++i) rotated[j * n + i] = voxel[j * n + voxels.rotations[j][i]];
    ops.moves += rot * n;

    std::vector<double> means(rot);
    TrackedBytes means_bytes(tracker, rot * kDouble);
    for (std::size_t j = 0; j < rot; ++j) {
      double acc = 0.0;
      ops.moves += 1;
      for (std::size_t i = 0; i < n; ++i) acc += rotated[j * n + i];
      ops.adds += n;
      means[j] = std::abs(acc * inv_n);
      ops.multiplies += 1;
    }

    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < rot; ++j) best = std::max(best, means[j]);
    ops.compares += rot;
    run.value[k] = best;
    ops.moves += 1;
  }
  run.peak_bytes = tracker.peak();
  validate_finite(run.value, "legacy_pool");
  return run;
}

PoolRegionSpec PoolRegionSpec::spatial(std::size_t kh, std::size_t kw, std::size_t sh, std::size_t sw,
                                       bool ceil_mode) {
  return PoolRegionSpec{{3, 4}, {kh, kw}, {sh, sw}, ceil_mode};
}

Counted<Tensor> rp_lift(const Tensor& t) {
  require(t.rank() == 4, Errc::RankMismatch, "rp_lift expects [N,C,H,W], got " + shape_to_string(t.shape()));
  return {t.reshape({t.dim(0), t.dim(1), 1, t.dim(2), t.dim(3)}), {}};
}

Counted<Tensor> rp_drop(const Tensor& t) {
  require(t.rank() == 5, Errc::RankMismatch, "rp_drop expects a rank-5 tensor, got " + shape_to_string(t.shape()));
  require(t.dim(2) == 1, Errc::NonUnitLiftedAxis, "lifted axis has extent " + std::to_string(t.dim(2)));
  return {t.reshape({t.dim(0), t.dim(1), t.dim(3), t.dim(4)}), {}};
}

Shape rp_pool_output_shape(const Shape& lifted, const PoolRegionSpec& spec) {
  const auto plan = plan_axes(lifted, spec);
  return {lifted[0], lifted[1], plan[0].out, plan[1].out, plan[2].out};
}

PoolRun rp_pool(const Tensor& t, const PoolRegionSpec& spec, const PoolFn& fn) {
  const auto plan = plan_axes(t.shape(), spec);
  const std::size_t planes = t.dim(0) * t.dim(1);
  const std::size_t plane_size = plan[0].extent * plan[1].extent * plan[2].extent;
  const std::size_t window_volume = plan[0].window * plan[1].window * plan[2].window;

  PoolRun run{Tensor({t.dim(0), t.dim(1), plan[0].out, plan[1].out, plan[2].out}), {}, 0};
  AllocTracker tracker;
  TrackedBytes output_bytes(tracker, run.value.size() * kDouble);
  std::vector<double> scratch;
  std::optional<TrackedBytes> scratch_bytes;

  std::size_t out_index = 0;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* plane = &t[pl * plane_size];
    for (std::size_t od = 0; od < plan[0].out; ++od)
      for (std::size_t oh = 0; oh < plan[1].out; ++oh)
        for (std::size_t ow = 0; ow < plan[2].out; ++ow) {
          const Region r = region_at(plan, od, oh, ow);
          const std::size_t count = r.count();
          std::span<const double> values;
          if (contiguous(r, plan)) {
            values = {plane + region_origin(r, plan), count};
          } else {
            if (!scratch_bytes) {
              scratch.resize(window_volume);
              scratch_bytes.emplace(tracker, window_volume * kDouble);
            }
            for_each_in_region(r, plan, [&](std::size_t flat, std::size_t k) { scratch[k] = plane[flat]; });
            run.ops.moves += count;
            values = {scratch.data(), count};
          }
          run.value[out_index++] = fn.reduce(values);
          run.ops += fn.cost(count);
          run.ops.moves += 2;  // accumulator init and result store
        }
  }
  run.peak_bytes = tracker.peak();
  validate_finite(run.value, "rp_pool");
  return run;
}

Tensor rp_pool_backward(const Tensor& t, const PoolRegionSpec& spec, const PoolFn& fn, const Tensor& upstream) {
  const auto plan = plan_axes(t.shape(), spec);
  require(upstream.shape() == rp_pool_output_shape(t.shape(), spec), Errc::ShapeMismatch,
          "rp_pool upstream gradient shape " + shape_to_string(upstream.shape()));
  const std::size_t planes = t.dim(0) * t.dim(1);
  const std::size_t plane_size = plan[0].extent * plan[1].extent * plan[2].extent;
  const std::size_t window_volume = plan[0].window * plan[1].window * plan[2].window;

  Tensor grad = Tensor::zeros_like(t);
  std::vector<double> values(window_volume), mask(window_volume);
  std::size_t out_index = 0;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* plane = &t[pl * plane_size];
    double* gplane = &grad[pl * plane_size];
    for (std::size_t od = 0; od < plan[0].out; ++od)
      for (std::size_t oh = 0; oh < plan[1].out; ++oh)
        for (std::size_t ow = 0; ow < plan[2].out; ++ow) {
          const Region r = region_at(plan, od, oh, ow);
          const std::size_t count = r.count();
          for_each_in_region(r, plan, [&](std::size_t flat, std::size_t k) { values[k] = plane[flat]; });
          fn.grad_mask({values.data(), count}, {mask.data(), count});
          const double up = upstream[out_index++];
          for_each_in_region(r, plan, [&](std::size_t flat, std::size_t k) { gplane[flat] += up * mask[k]; });
        }
  }
  return grad;
}

PoolRun replaceable_pool_3d(const Tensor& t, const PoolRegionSpec& spec, const PoolFn& fn) {
  auto lifted = rp_lift(t);
  PoolRun pooled = rp_pool(lifted.value, spec, fn);
  auto dropped = rp_drop(pooled.value);
  return {std::move(dropped.value), lifted.ops + pooled.ops + dropped.ops, pooled.peak_bytes};
}

PoolRun replaceable_pool_2d(const Tensor& image, const PoolRegionSpec& spec, const PoolFn& fn) {
  require(image.rank() == 3, Errc::RankMismatch, "replaceable_pool_2d expects [C,H,W]");
  PoolRun run = replaceable_pool_3d(image.reshape({1, image.dim(0), image.dim(1), image.dim(2)}), spec, fn);
  run.value = std::move(run.value).reshape({run.value.dim(1), run.value.dim(2), run.value.dim(3)});
  return run;
}

Tensor replaceable_pool_2d_backward(const Tensor& image, const PoolRegionSpec& spec, const PoolFn& fn,
                                    const Tensor& upstream) {
  require(image.rank() == 3, Errc::RankMismatch, "replaceable_pool_2d expects [C,H,W]");
  const Tensor lifted = image.reshape({1, image.dim(0), 1, image.dim(1), image.dim(2)});
  const Shape out = rp_pool_output_shape(lifted.shape(), spec);
  require(upstream.size() == shape_volume(out), Errc::ShapeMismatch, "pool upstream gradient size");
  return rp_pool_backward(lifted, spec, fn, upstream.reshape(out)).reshape(image.shape());
}

PoolRun replaceable_pool_voxels(const VoxelFeatureSet& voxels, const PoolFn& fn) {
  validate_voxels(voxels);
  const auto& f = voxels.features;
  const std::size_t n = f.dim(2);
  const PoolRegionSpec spec{{4}, {n}, {n}, false};
  return replaceable_pool_3d(f.reshape({f.dim(0), f.dim(1), 1, n}), spec, fn);
}

PoolLayer::PoolLayer(const PoolFn& fn, PoolRegionSpec spec)
    : fn_(fn), spec_(std::move(spec)), kind_("rp_pool:" + fn.name) {}

Tensor PoolLayer::forward(const Tensor& input) const { return replaceable_pool_2d(input, spec_, fn_).value; }

LayerGrad PoolLayer::backward(const Tensor& input, const Tensor& upstream) const {
  return {replaceable_pool_2d_backward(input, spec_, fn_, upstream), {}};
}

}  // namespace rpdk
