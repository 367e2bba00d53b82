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

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rpdk/layer.hpp"
#include "rpdk/op_counter.hpp"
#include "rpdk/tensor.hpp"

namespace rpdk {

/// A named reduction over one pooling region. `grad_mask` writes d reduce / d v_i
/// for every region element; `cost` reports the primitive operations `reduce`
/// spends on a region of the given size.
struct PoolFn {
  std::string name;
  std::function<double(std::span<const double>)> reduce;
  std::function<void(std::span<const double>, std::span<double>)> grad_mask;
  std::function<OpCounter(std::size_t)> cost;
};

PoolFn max_pool_fn();
PoolFn avg_pool_fn();
/// Power mean with p = 2: sqrt(mean(v^2)).
PoolFn lp_pool_fn();
/// Exponentially weighted mean: sum(v e^v) / sum(e^v).
PoolFn soft_pool_fn();

/// Name -> PoolFn map. Entries are never removed, so references returned by
/// lookup stay valid for the registry's lifetime. Registration takes a writer
/// lock; lookups share a reader lock.
class PoolRegistry {
 public:
  /// Registry preloaded with "max", "avg", "lp" and "soft".
  static PoolRegistry& global();

  explicit PoolRegistry(bool with_builtins = true);
  PoolRegistry(const PoolRegistry&) = delete;
  PoolRegistry& operator=(const PoolRegistry&) = delete;

  void register_pool(PoolFn fn);
  const PoolFn& lookup(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::vector<std::string> names() const;

 private:
  mutable std::shared_mutex mutex_;
  std::map<std::string, std::unique_ptr<const PoolFn>, std::less<>> fns_;
};

void register_pool(PoolFn fn);
const PoolFn& lookup_pool(std::string_view name);

/// Per-voxel features under every rotation variant, plus the caller-supplied
/// slot maps that realize each rotation. rotations[0] must be the identity.
struct VoxelFeatureSet {
  Tensor features;  // [K, N_rot, n]
  std::vector<std::vector<std::size_t>> rotations;
};

/// Identity map followed by `count - 1` cyclic shifts of the n slots.
std::vector<std::vector<std::size_t>> cyclic_rotations(std::size_t count, std::size_t n);

struct PoolRun {
  Tensor value;
  OpCounter ops;
  std::uint64_t peak_bytes = 0;  // peak transient allocation, output included
};

/// Rotation-pooling baseline: F_k = max_j |mean_i f_k,j,rot_j(i)|.
/// Per voxel it gathers every rotation into a buffer, sums and normalizes each
/// variant, then compares the magnitudes.
PoolRun legacy_pool(const VoxelFeatureSet& voxels);

/// Which axes of a rank-5 [N,C,D,H,W] tensor are pooled, with window and stride
/// per pooled axis. With ceil_mode, trailing partial windows are kept and
/// reduce over their in-bounds elements only.
struct PoolRegionSpec {
  std::vector<std::size_t> axes;
  std::vector<std::size_t> window;
  std::vector<std::size_t> stride;
  bool ceil_mode = false;

  static PoolRegionSpec spatial(std::size_t kh, std::size_t kw, std::size_t sh, std::size_t sw,
                                bool ceil_mode = false);
};

Counted<Tensor> rp_lift(const Tensor& t);
PoolRun rp_pool(const Tensor& t, const PoolRegionSpec& spec, const PoolFn& fn);
Tensor rp_pool_backward(const Tensor& t, const PoolRegionSpec& spec, const PoolFn& fn, const Tensor& upstream);
Counted<Tensor> rp_drop(const Tensor& t);

Shape rp_pool_output_shape(const Shape& lifted, const PoolRegionSpec& spec);

/// drop(pool(lift(t))) for t = [N,C,H,W]; counters and peaks aggregate all stages.
PoolRun replaceable_pool_3d(const Tensor& t, const PoolRegionSpec& spec, const PoolFn& fn);
/// Same pipeline for a [C,H,W] bird's-eye image.
PoolRun replaceable_pool_2d(const Tensor& image, const PoolRegionSpec& spec, const PoolFn& fn);
Tensor replaceable_pool_2d_backward(const Tensor& image, const PoolRegionSpec& spec, const PoolFn& fn,
                                    const Tensor& upstream);

/// Lays the voxel workload out as [K, N_rot, 1, n] and pools each rotation
/// variant over its n point features.
PoolRun replaceable_pool_voxels(const VoxelFeatureSet& voxels, const PoolFn& fn);

/// 2-D replaceable pooling as a layer over [C,H,W] inputs.
class PoolLayer final : public Layer {
 public:
  PoolLayer(const PoolFn& fn, PoolRegionSpec spec);

  std::string_view kind() const override { return kind_; }
  Tensor forward(const Tensor& input) const override;
  LayerGrad backward(const Tensor& input, const Tensor& upstream) const override;
  std::vector<Tensor*> parameters() override { return {}; }
  std::vector<const Tensor*> parameters() const override { return {}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<PoolLayer>(*this); }

 private:
  PoolFn fn_;
  PoolRegionSpec spec_;
  std::string kind_;
};

}  // namespace rpdk
