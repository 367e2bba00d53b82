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

#include <cstddef>
#include <random>
#include <string_view>
#include <vector>

#include "rpdk/layer.hpp"
#include "rpdk/ops.hpp"
#include "rpdk/pooling.hpp"

namespace rpdk {

// ---------------------------------------------------------------------------
// Bilinear sampling
// ---------------------------------------------------------------------------

/// Bilinear interpolation of every channel of map [C,H,W] at column px, row py.
/// Integer coordinates address grid cells; reads outside the map are zero.
std::vector<double> bilinear_sample(const Tensor& map, double px, double py);

// ---------------------------------------------------------------------------
// Deformable convolution
// ---------------------------------------------------------------------------

/// Convolution whose taps read the input at learned fractional offsets.
/// A standard convolution (offset_kernel, offset_bias) with the same geometry
/// predicts 2*kh*kw offset channels: channel 2n is the row offset and 2n+1 the
/// column offset of tap n = ky*kw + kx.
class DeformableLayer final : public Layer {
 public:
  DeformableLayer(Tensor weights, Tensor offset_kernel, Tensor offset_bias, ConvParams params);

  /// He-uniform weights and an all-zero offset predictor, so the layer starts
  /// as a plain convolution.
  static DeformableLayer standard_init(std::size_t c_in, std::size_t c_out, std::size_t kh, std::size_t kw,
                                       ConvParams params, std::mt19937_64& rng);

  std::string_view kind() const override { return "deform_conv"; }
  Tensor forward(const Tensor& input) const override;
  /// d_params = {d_weights, d_offset_kernel, d_offset_bias}.
  LayerGrad backward(const Tensor& input, const Tensor& upstream) const override;
  std::vector<Tensor*> parameters() override { return {&weights_, &offset_kernel_, &offset_bias_}; }
  std::vector<const Tensor*> parameters() const override { return {&weights_, &offset_kernel_, &offset_bias_}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<DeformableLayer>(*this); }

  /// Offsets predicted for `input`: [2*kh*kw, H', W'].
  Tensor offsets(const Tensor& input) const;

  const Tensor& weights() const noexcept { return weights_; }
  const ConvParams& params() const noexcept { return params_; }

 private:
  Tensor weights_;        // [C_out, C_in, kh, kw]
  Tensor offset_kernel_;  // [2*kh*kw, C_in, kh, kw]
  Tensor offset_bias_;    // [2*kh*kw]
  ConvParams params_;
};

Tensor deform_conv(const DeformableLayer& layer, const Tensor& input);

// ---------------------------------------------------------------------------
// Replaceable ROI pooling
// ---------------------------------------------------------------------------

/// Region of interest. (x, y) is the top-left cell; the box spans cells
/// [x, x+w-1] x [y, y+h-1] of the level-0 map, so w and h are extents in
/// input pixels when level 0 has stride 1.
struct Roi {
  double x = 0.0;
  double y = 0.0;
  double w = 1.0;
  double h = 1.0;
  int level = 0;
};

/// ROI expressed in the coordinates of pyramid level `level`, where cell j of
/// level l averages level-0 cells [2^l j, 2^l (j+1) - 1].
Roi roi_at_level(const Roi& roi, int level);

/// Splits the ROI into grid x grid bins. Each bin is reduced by `fn` over four
/// bilinear samples taken at its corners, per channel. Output [C, grid, grid].
Tensor rroi_pool(const Tensor& map, const Roi& roi, std::size_t grid, const PoolFn& fn);
Tensor rroi_pool(const Tensor& map, const Roi& roi, std::size_t grid, std::string_view fn_name);
Tensor rroi_pool_backward(const Tensor& map, const Roi& roi, std::size_t grid, const PoolFn& fn,
                          const Tensor& upstream);

// ---------------------------------------------------------------------------
// Level assignment and multi-scale fusion
// ---------------------------------------------------------------------------

/// k = floor(k0 + log2(sqrt(w*h) / reference)), unclamped.
int assign_level(const Roi& roi, int k0, double reference = 224.0);
/// Same, clamped to [0, levels - 1].
int assign_level(const Roi& roi, int k0, double reference, std::size_t levels);

/// Level l+1 is level l reduced by a 2x2 stride-2 replaceable pool (ceil mode),
/// so the pooling window measured on level 0 doubles from level to level.
struct FeaturePyramid {
  std::vector<Tensor> levels;
  std::size_t scale_base = 1;

  std::size_t window(std::size_t level) const { return scale_base << level; }
};

FeaturePyramid build_pyramid(const Tensor& map, std::size_t depth, const PoolFn& fn);
/// Pushes per-level gradients down to level 0; d_levels[l] matches levels[l].
Tensor build_pyramid_backward(const FeaturePyramid& pyramid, const PoolFn& fn, std::vector<Tensor> d_levels);

struct FusionConfig {
  std::size_t grid = 2;
  int k0 = 4;
  double reference = 224.0;
};

/// Every ROI is pooled on its assigned level and, when it exists, on the next
/// coarser level; the two results are averaged elementwise. Output
/// [num_rois, C, grid, grid]; an empty ROI list yields an empty tensor.
Tensor fuse_pyramid(const FeaturePyramid& pyramid, const std::vector<Roi>& rois, const FusionConfig& config,
                    const PoolFn& fn);
std::vector<Tensor> fuse_pyramid_backward(const FeaturePyramid& pyramid, const std::vector<Roi>& rois,
                                          const FusionConfig& config, const PoolFn& fn, const Tensor& upstream);

/// Levels fused for one ROI: its assigned level and, if present, the next one.
std::vector<int> fusion_levels(const FeaturePyramid& pyramid, const Roi& roi, const FusionConfig& config);

// ---------------------------------------------------------------------------
// EAConv block
// ---------------------------------------------------------------------------

/// Two stacked deformable convolutions followed by RROI pooling of one region.
struct EAConvBlock {
  DeformableLayer first;
  DeformableLayer second;
  Roi roi;
  std::size_t grid = 1;
  PoolFn fn;
};

Tensor eaconv(const EAConvBlock& block, const Tensor& input);

/// eaconv as a layer over its input (parameters of both deformable layers).
class EAConvLayer final : public Layer {
 public:
  explicit EAConvLayer(EAConvBlock block) : block_(std::move(block)) {}

  std::string_view kind() const override { return "eaconv"; }
  Tensor forward(const Tensor& input) const override { return eaconv(block_, input); }
  LayerGrad backward(const Tensor& input, const Tensor& upstream) const override;
  std::vector<Tensor*> parameters() override;
  std::vector<const Tensor*> parameters() const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<EAConvLayer>(*this); }

 private:
  EAConvBlock block_;
};

/// RROI pooling of a fixed region as a layer over the feature map.
class RroiPoolLayer final : public Layer {
 public:
  RroiPoolLayer(Roi roi, std::size_t grid, const PoolFn& fn);

  std::string_view kind() const override { return kind_; }
  Tensor forward(const Tensor& input) const override { return rroi_pool(input, roi_, grid_, fn_); }
  LayerGrad backward(const Tensor& input, const Tensor& upstream) const override {
    return {rroi_pool_backward(input, roi_, grid_, fn_, upstream), {}};
  }
  std::vector<Tensor*> parameters() override { return {}; }
  std::vector<const Tensor*> parameters() const override { return {}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<RroiPoolLayer>(*this); }

 private:
  Roi roi_;
  std::size_t grid_;
  PoolFn fn_;
  std::string kind_;
};

struct MultiScaleConfig {
  std::size_t depth = 4;       // pyramid levels
  double anchor = 4.0;         // square anchor side, in level-0 cells
  FusionConfig fusion;
  std::string pyramid_pool = "avg";
  std::string rroi_pool = "max";
};

/// Dense multi-scale head: builds a pyramid over a [C,h,w] feature map, pools
/// one anchor ROI centred on every cell through fuse_pyramid, and returns the
/// input channels followed by the C*grid^2 fused ROI features of each cell.
class MultiScaleRoiLayer final : public Layer {
 public:
  explicit MultiScaleRoiLayer(MultiScaleConfig config);

  std::string_view kind() const override { return "fusion"; }
  Tensor forward(const Tensor& input) const override;
  LayerGrad backward(const Tensor& input, const Tensor& upstream) const override;
  std::vector<Tensor*> parameters() override { return {}; }
  std::vector<const Tensor*> parameters() const override { return {}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<MultiScaleRoiLayer>(*this); }

  std::size_t output_channels(std::size_t input_channels) const;
  std::vector<Roi> anchors(std::size_t h, std::size_t w) const;

 private:
  MultiScaleConfig config_;
  PoolFn pyramid_fn_;
  PoolFn rroi_fn_;
};

}  // namespace rpdk
