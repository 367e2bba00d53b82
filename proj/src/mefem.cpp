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

#include "rpdk/mefem.hpp"

#include <array>
#include <cmath>

namespace rpdk {

namespace {

struct Bilerp {
  long x0 = 0, y0 = 0;
  double ax = 0.0, ay = 0.0;  // weight of the +1 neighbour along each axis
};

Bilerp bilerp_at(double px, double py) {
  Bilerp b;
  const double fx = std::floor(px), fy = std::floor(py);
  b.x0 = static_cast<long>(fx);
  b.y0 = static_cast<long>(fy);
  b.ax = px - fx;
  b.ay = py - fy;
  return b;
}

struct Plane {
  const double* data;
  long h, w;
  double at(long y, long x) const { return (y >= 0 && y < h && x >= 0 && x < w) ? data[y * w + x] : 0.0; }
};

struct Corners {
  double v00, v01, v10, v11;
};

Corners corners(const Plane& p, const Bilerp& b) {
  return {p.at(b.y0, b.x0), p.at(b.y0, b.x0 + 1), p.at(b.y0 + 1, b.x0), p.at(b.y0 + 1, b.x0 + 1)};
}

double interpolate(const Plane& p, const Bilerp& b) {
  const Corners v = corners(p, b);
  return (1.0 - b.ay) * ((1.0 - b.ax) * v.v00 + b.ax * v.v01) + b.ay * ((1.0 - b.ax) * v.v10 + b.ax * v.v11);
}

void scatter(double* grad, long h, long w, const Bilerp& b, double g) {
  auto add = [&](long y, long x, double weight) {
    if (y >= 0 && y < h && x >= 0 && x < w) grad[y * w + x] += g * weight;
  };
  add(b.y0, b.x0, (1.0 - b.ay) * (1.0 - b.ax));
  add(b.y0, b.x0 + 1, (1.0 - b.ay) * b.ax);
  add(b.y0 + 1, b.x0, b.ay * (1.0 - b.ax));
  add(b.y0 + 1, b.x0 + 1, b.ay * b.ax);
}

// d value / d px and d value / d py
std::pair<double, double> coordinate_grad(const Plane& p, const Bilerp& b) {
  const Corners v = corners(p, b);
  const double dx = (1.0 - b.ay) * (v.v01 - v.v00) + b.ay * (v.v11 - v.v10);
  const double dy = (1.0 - b.ax) * (v.v10 - v.v00) + b.ax * (v.v11 - v.v01);
  return {dx, dy};
}

void require_map(const Tensor& map, const char* what) {
  require(map.rank() == 3, Errc::RankMismatch, std::string(what) + " expects a [C,H,W] map");
}

// Four corner samples per bin, bins in row-major order.
std::vector<Bilerp> rroi_samples(const Roi& roi, std::size_t grid) {
  require(roi.w > 0.0 && roi.h > 0.0, Errc::DegenerateRoi, "ROI width and height must be positive");
  require(grid >= 1, Errc::InvalidHyperparam, "RROI grid must be at least 1");
  const double bw = std::max(roi.w - 1.0, 0.0) / static_cast<double>(grid);
  const double bh = std::max(roi.h - 1.0, 0.0) / static_cast<double>(grid);
  std::vector<Bilerp> samples;
  samples.reserve(grid * grid * 4);
  for (std::size_t gy = 0; gy < grid; ++gy)
    for (std::size_t gx = 0; gx < grid; ++gx)
      for (std::size_t sy = 0; sy < 2; ++sy)
        for (std::size_t sx = 0; sx < 2; ++sx)
          samples.push_back(bilerp_at(roi.x + static_cast<double>(gx + sx) * bw,
                                      roi.y + static_cast<double>(gy + sy) * bh));
  return samples;
}

}  // namespace

std::vector<double> bilinear_sample(const Tensor& map, double px, double py) {
  require_map(map, "bilinear_sample");
  const long h = static_cast<long>(map.dim(1)), w = static_cast<long>(map.dim(2));
  const Bilerp b = bilerp_at(px, py);
  std::vector<double> out(map.dim(0));
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = interpolate({&map[c * h * w], h, w}, b);
  return out;
}

// --- deformable convolution ------------------------------------------------

DeformableLayer::DeformableLayer(Tensor weights, Tensor offset_kernel, Tensor offset_bias, ConvParams params)
    : weights_(std::move(weights)),
      offset_kernel_(std::move(offset_kernel)),
      offset_bias_(std::move(offset_bias)),
      params_(params) {
  require(weights_.rank() == 4, Errc::ShapeMismatch, "deformable weights must be [C_out,C_in,kh,kw]");
  const std::size_t taps = weights_.dim(2) * weights_.dim(3);
  require(offset_kernel_.shape() == Shape{2 * taps, weights_.dim(1), weights_.dim(2), weights_.dim(3)},
          Errc::ShapeMismatch, "offset predictor must produce 2*kh*kw channels with the same geometry");
  require(offset_bias_.shape() == Shape{2 * taps}, Errc::ShapeMismatch, "offset bias must have 2*kh*kw entries");
}

DeformableLayer DeformableLayer::standard_init(std::size_t c_in, std::size_t c_out, std::size_t kh, std::size_t kw,
                                               ConvParams params, std::mt19937_64& rng) {
  const std::size_t taps = kh * kw;
  return DeformableLayer(he_uniform({c_out, c_in, kh, kw}, c_in * taps, rng), Tensor({2 * taps, c_in, kh, kw}),
                         Tensor({2 * taps}), params);
}

Tensor DeformableLayer::offsets(const Tensor& input) const {
  Tensor off = conv2d(input, offset_kernel_, params_);
  add_channel_bias(off, offset_bias_);
  return off;
}

namespace {

struct DeformPlan {
  std::size_t c_in, h, w, kh, kw, out_h, out_w;
  std::vector<Bilerp> taps;  // [K, P]: sample position of tap n at output p

  std::size_t positions() const { return out_h * out_w; }
  std::size_t tap_count() const { return kh * kw; }
};

DeformPlan plan_deform(const Tensor& input, const Tensor& weights, const Tensor& offsets, const ConvParams& params) {
  require_map(input, "deform_conv");
  require(weights.dim(1) == input.dim(0), Errc::ShapeMismatch,
          "deformable weights " + shape_to_string(weights.shape()) + " vs input " + shape_to_string(input.shape()));
  DeformPlan plan{input.dim(0), input.dim(1), input.dim(2), weights.dim(2), weights.dim(3),
                  offsets.dim(1), offsets.dim(2), {}};
  const std::size_t k = plan.tap_count(), p = plan.positions();
  plan.taps.resize(k * p);
  for (std::size_t n = 0; n < k; ++n) {
    const double ky = static_cast<double>(n / plan.kw), kx = static_cast<double>(n % plan.kw);
    const double* dy = &offsets[(2 * n) * p];
    const double* dx = &offsets[(2 * n + 1) * p];
    for (std::size_t oy = 0; oy < plan.out_h; ++oy)
      for (std::size_t ox = 0; ox < plan.out_w; ++ox) {
        const std::size_t i = oy * plan.out_w + ox;
        const double by = static_cast<double>(oy) * params.stride - params.padding + ky;
        const double bx = static_cast<double>(ox) * params.stride - params.padding + kx;
        plan.taps[n * p + i] = bilerp_at(bx + dx[i], by + dy[i]);
      }
  }
  return plan;
}

// Sampled columns [C_in*K, P].
Tensor deform_columns(const Tensor& input, const DeformPlan& plan) {
  const std::size_t k = plan.tap_count(), p = plan.positions();
  Tensor cols({plan.c_in * k, p});
  const long h = static_cast<long>(plan.h), w = static_cast<long>(plan.w);
  for (std::size_t c = 0; c < plan.c_in; ++c) {
    const Plane plane{&input[c * plan.h * plan.w], h, w};
    for (std::size_t n = 0; n < k; ++n) {
      double* row = &cols[(c * k + n) * p];
      for (std::size_t i = 0; i < p; ++i) row[i] = interpolate(plane, plan.taps[n * p + i]);
    }
  }
  return cols;
}

}  // namespace

Tensor DeformableLayer::forward(const Tensor& input) const {
  const Tensor off = offsets(input);
  const DeformPlan plan = plan_deform(input, weights_, off, params_);
  const Tensor cols = deform_columns(input, plan);
  const std::size_t c_out = weights_.dim(0);
  Tensor out = matmul(weights_.reshape({c_out, plan.c_in * plan.tap_count()}), cols);
  out = std::move(out).reshape({c_out, plan.out_h, plan.out_w});
  validate_finite(out, "deform_conv");
  return out;
}

LayerGrad DeformableLayer::backward(const Tensor& input, const Tensor& upstream) const {
  const Tensor off = offsets(input);
  const DeformPlan plan = plan_deform(input, weights_, off, params_);
  const Tensor cols = deform_columns(input, plan);
  const std::size_t c_out = weights_.dim(0), k = plan.tap_count(), p = plan.positions();
  require(upstream.shape() == Shape{c_out, plan.out_h, plan.out_w}, Errc::ShapeMismatch,
          "deform_conv upstream gradient shape " + shape_to_string(upstream.shape()));

  const Tensor up = upstream.reshape({c_out, p});
  const Tensor w_flat = weights_.reshape({c_out, plan.c_in * k});
  Tensor d_weights = matmul_nt(up, cols).reshape(weights_.shape());
  const Tensor d_cols = matmul_tn(w_flat, up);

  Tensor d_input = Tensor::zeros_like(input);
  Tensor d_off = Tensor::zeros_like(off);
  const long h = static_cast<long>(plan.h), w = static_cast<long>(plan.w);
  for (std::size_t c = 0; c < plan.c_in; ++c) {
    const Plane plane{&input[c * plan.h * plan.w], h, w};
    double* grad_plane = &d_input[c * plan.h * plan.w];
    for (std::size_t n = 0; n < k; ++n) {
      const double* g = &d_cols[(c * k + n) * p];
      double* g_dy = &d_off[(2 * n) * p];
      double* g_dx = &d_off[(2 * n + 1) * p];
      for (std::size_t i = 0; i < p; ++i) {
        const Bilerp& b = plan.taps[n * p + i];
        scatter(grad_plane, h, w, b, g[i]);
        const auto [vx, vy] = coordinate_grad(plane, b);
        g_dx[i] += g[i] * vx;
        g_dy[i] += g[i] * vy;
      }
    }
  }

  Conv2dGrads offset_grads = conv2d_backward(input, offset_kernel_, d_off, params_);
  for (std::size_t i = 0; i < d_input.size(); ++i) d_input[i] += offset_grads.d_input[i];

  LayerGrad g{std::move(d_input), {}};
  g.d_params.push_back(std::move(d_weights));
  g.d_params.push_back(std::move(offset_grads.d_kernel));
  g.d_params.push_back(channel_sums(d_off));
  return g;
}

Tensor deform_conv(const DeformableLayer& layer, const Tensor& input) { return layer.forward(input); }

// --- RROI pooling -------------------------------------------------------------

Roi roi_at_level(const Roi& roi, int level) {
  require(level >= 0, Errc::InvalidHyperparam, "pyramid level must be non-negative");
  const double f = std::ldexp(1.0, level);
  const double centre = (f - 1.0) / 2.0;
  Roi out;
  out.x = (roi.x - centre) / f;
  out.y = (roi.y - centre) / f;
  out.w = std::max(roi.w - 1.0, 0.0) / f + 1.0;
  out.h = std::max(roi.h - 1.0, 0.0) / f + 1.0;
  out.level = level;
  return out;
}

Tensor rroi_pool(const Tensor& map, const Roi& roi, std::size_t grid, const PoolFn& fn) {
  require_map(map, "rroi_pool");
  const auto samples = rroi_samples(roi, grid);
  const std::size_t channels = map.dim(0);
  const long h = static_cast<long>(map.dim(1)), w = static_cast<long>(map.dim(2));
  Tensor out({channels, grid, grid});
  std::array<double, 4> values{};
  for (std::size_t c = 0; c < channels; ++c) {
    const Plane plane{&map[c * h * w], h, w};
    for (std::size_t b = 0; b < grid * grid; ++b) {
      for (std::size_t s = 0; s < 4; ++s) values[s] = interpolate(plane, samples[b * 4 + s]);
      out[c * grid * grid + b] = fn.reduce(values);
    }
  }
  validate_finite(out, "rroi_pool");
  return out;
}

Tensor rroi_pool(const Tensor& map, const Roi& roi, std::size_t grid, std::string_view fn_name) {
  return rroi_pool(map, roi, grid, lookup_pool(fn_name));
}

Tensor rroi_pool_backward(const Tensor& map, const Roi& roi, std::size_t grid, const PoolFn& fn,
                          const Tensor& upstream) {
  require_map(map, "rroi_pool");
  const auto samples = rroi_samples(roi, grid);
  const std::size_t channels = map.dim(0);
  require(upstream.shape() == Shape{channels, grid, grid}, Errc::ShapeMismatch, "rroi_pool upstream gradient shape");
  const long h = static_cast<long>(map.dim(1)), w = static_cast<long>(map.dim(2));
  Tensor grad = Tensor::zeros_like(map);
  std::array<double, 4> values{}, mask{};
  for (std::size_t c = 0; c < channels; ++c) {
    const Plane plane{&map[c * h * w], h, w};
    double* gplane = &grad[c * h * w];
    for (std::size_t b = 0; b < grid * grid; ++b) {
      const double up = upstream[c * grid * grid + b];
      if (up == 0.0) continue;
      for (std::size_t s = 0; s < 4; ++s) values[s] = interpolate(plane, samples[b * 4 + s]);
      fn.grad_mask(values, mask);
      for (std::size_t s = 0; s < 4; ++s)
        if (mask[s] != 0.0) scatter(gplane, h, w, samples[b * 4 + s], up * mask[s]);
    }
  }
  return grad;
}

// --- level assignment and fusion --------------------------------------------------

int assign_level(const Roi& roi, int k0, double reference) {
  require(roi.w > 0.0 && roi.h > 0.0, Errc::DegenerateRoi, "ROI width and height must be positive");
  require(reference > 0.0, Errc::InvalidHyperparam, "reference size must be positive");
  return static_cast<int>(std::floor(k0 + std::log2(std::sqrt(roi.w * roi.h) / reference)));
}

int assign_level(const Roi& roi, int k0, double reference, std::size_t levels) {
  require(levels >= 1, Errc::InvalidHyperparam, "pyramid needs at least one level");
  return std::clamp(assign_level(roi, k0, reference), 0, static_cast<int>(levels) - 1);
}

FeaturePyramid build_pyramid(const Tensor& map, std::size_t depth, const PoolFn& fn) {
  require_map(map, "build_pyramid");
  require(depth >= 1, Errc::InvalidHyperparam, "pyramid depth must be at least 1");
  FeaturePyramid pyramid;
  pyramid.levels.push_back(map);
  const auto spec = PoolRegionSpec::spatial(2, 2, 2, 2, true);
  for (std::size_t l = 1; l < depth; ++l)
    pyramid.levels.push_back(replaceable_pool_2d(pyramid.levels.back(), spec, fn).value);
  return pyramid;
}

Tensor build_pyramid_backward(const FeaturePyramid& pyramid, const PoolFn& fn, std::vector<Tensor> d_levels) {
  require(d_levels.size() == pyramid.levels.size(), Errc::ShapeMismatch, "one gradient per pyramid level required");
  const auto spec = PoolRegionSpec::spatial(2, 2, 2, 2, true);
  for (std::size_t l = d_levels.size() - 1; l >= 1; --l) {
    const Tensor down = replaceable_pool_2d_backward(pyramid.levels[l - 1], spec, fn, d_levels[l]);
    for (std::size_t i = 0; i < down.size(); ++i) d_levels[l - 1][i] += down[i];
  }
  return std::move(d_levels[0]);
}

std::vector<int> fusion_levels(const FeaturePyramid& pyramid, const Roi& roi, const FusionConfig& config) {
  const int level = assign_level(roi, config.k0, config.reference, pyramid.levels.size());
  std::vector<int> levels{level};
  if (static_cast<std::size_t>(level) + 1 < pyramid.levels.size()) levels.push_back(level + 1);
  return levels;
}

Tensor fuse_pyramid(const FeaturePyramid& pyramid, const std::vector<Roi>& rois, const FusionConfig& config,
                    const PoolFn& fn) {
  require(!pyramid.levels.empty(), Errc::InvalidHyperparam, "empty pyramid");
  if (rois.empty()) return Tensor();
  const std::size_t channels = pyramid.levels[0].dim(0), g2 = config.grid * config.grid;
  for (const auto& level : pyramid.levels)
    require(level.rank() == 3 && level.dim(0) == channels, Errc::ShapeMismatch, "pyramid levels differ in channels");
  Tensor out({rois.size(), channels, config.grid, config.grid});
  const std::size_t per_roi = channels * g2;
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const auto levels = fusion_levels(pyramid, rois[r], config);
    double* dst = &out[r * per_roi];
    const Tensor first = rroi_pool(pyramid.levels[levels[0]], roi_at_level(rois[r], levels[0]), config.grid, fn);
    if (levels.size() == 1) {
      std::copy(first.data().begin(), first.data().end(), dst);
      continue;
    }
    const Tensor second = rroi_pool(pyramid.levels[levels[1]], roi_at_level(rois[r], levels[1]), config.grid, fn);
    for (std::size_t i = 0; i < per_roi; ++i) dst[i] = 0.5 * (first[i] + second[i]);
  }
  return out;
}

std::vector<Tensor> fuse_pyramid_backward(const FeaturePyramid& pyramid, const std::vector<Roi>& rois,
                                          const FusionConfig& config, const PoolFn& fn, const Tensor& upstream) {
  std::vector<Tensor> d_levels;
  for (const auto& level : pyramid.levels) d_levels.push_back(Tensor::zeros_like(level));
  if (rois.empty()) return d_levels;
  const std::size_t channels = pyramid.levels[0].dim(0);
  require(upstream.shape() == Shape{rois.size(), channels, config.grid, config.grid}, Errc::ShapeMismatch,
          "fuse_pyramid upstream gradient shape");
  const std::size_t per_roi = channels * config.grid * config.grid;
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const auto levels = fusion_levels(pyramid, rois[r], config);
    const double weight = levels.size() == 1 ? 1.0 : 0.5;
    Tensor up({channels, config.grid, config.grid});
    for (std::size_t i = 0; i < per_roi; ++i) up[i] = weight * upstream[r * per_roi + i];
    for (int l : levels) {
      const Tensor g = rroi_pool_backward(pyramid.levels[l], roi_at_level(rois[r], l), config.grid, fn, up);
      for (std::size_t i = 0; i < g.size(); ++i) d_levels[l][i] += g[i];
    }
  }
  return d_levels;
}

// --- EAConv -------------------------------------------------------------------

Tensor eaconv(const EAConvBlock& block, const Tensor& input) {
  const Tensor y1 = block.first.forward(input);
  const Tensor y2 = block.second.forward(y1);
  return rroi_pool(y2, block.roi, block.grid, block.fn);
}

LayerGrad EAConvLayer::backward(const Tensor& input, const Tensor& upstream) const {
  const Tensor y1 = block_.first.forward(input);
  const Tensor y2 = block_.second.forward(y1);
  const Tensor d_y2 = rroi_pool_backward(y2, block_.roi, block_.grid, block_.fn, upstream);
  LayerGrad g2 = block_.second.backward(y1, d_y2);
  LayerGrad g1 = block_.first.backward(input, g2.d_input);
  LayerGrad g{std::move(g1.d_input), std::move(g1.d_params)};
  for (auto& t : g2.d_params) g.d_params.push_back(std::move(t));
  return g;
}

std::vector<Tensor*> EAConvLayer::parameters() {
  auto p = block_.first.parameters();
  for (auto* t : block_.second.parameters()) p.push_back(t);
  return p;
}

std::vector<const Tensor*> EAConvLayer::parameters() const {
  const DeformableLayer& first = block_.first;
  const DeformableLayer& second = block_.second;
  auto p = first.parameters();
  for (const auto* t : second.parameters()) p.push_back(t);
  return p;
}

RroiPoolLayer::RroiPoolLayer(Roi roi, std::size_t grid, const PoolFn& fn)
    : roi_(roi), grid_(grid), fn_(fn), kind_("rroi_pool:" + fn.name) {}

// --- dense multi-scale head -------------------------------------------------------

MultiScaleRoiLayer::MultiScaleRoiLayer(MultiScaleConfig config)
    : config_(std::move(config)),
      pyramid_fn_(lookup_pool(config_.pyramid_pool)),
      rroi_fn_(lookup_pool(config_.rroi_pool)) {
  require(config_.depth >= 1, Errc::InvalidHyperparam, "pyramid depth must be at least 1");
  require(config_.anchor > 0.0, Errc::InvalidHyperparam, "anchor size must be positive");
}

std::size_t MultiScaleRoiLayer::output_channels(std::size_t input_channels) const {
  return input_channels * (1 + config_.fusion.grid * config_.fusion.grid);
}

std::vector<Roi> MultiScaleRoiLayer::anchors(std::size_t h, std::size_t w) const {
  std::vector<Roi> rois;
  rois.reserve(h * w);
  const double half = (config_.anchor - 1.0) / 2.0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      rois.push_back({static_cast<double>(x) - half, static_cast<double>(y) - half, config_.anchor, config_.anchor, 0});
  return rois;
}

Tensor MultiScaleRoiLayer::forward(const Tensor& input) const {
  require_map(input, "multi-scale head");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2), g2 = config_.fusion.grid * config_.fusion.grid;
  const FeaturePyramid pyramid = build_pyramid(input, config_.depth, pyramid_fn_);
  const Tensor fused = fuse_pyramid(pyramid, anchors(h, w), config_.fusion, rroi_fn_);
  Tensor out({output_channels(c), h, w});
  std::copy(input.data().begin(), input.data().end(), out.data().begin());
  const std::size_t plane = h * w;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t f = 0; f < c * g2; ++f) out[(c + f) * plane + p] = fused[p * c * g2 + f];
  return out;
}

LayerGrad MultiScaleRoiLayer::backward(const Tensor& input, const Tensor& upstream) const {
  require_map(input, "multi-scale head");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2), g2 = config_.fusion.grid * config_.fusion.grid;
  require(upstream.shape() == Shape{output_channels(c), h, w}, Errc::ShapeMismatch, "multi-scale upstream shape");
  const FeaturePyramid pyramid = build_pyramid(input, config_.depth, pyramid_fn_);
  const auto rois = anchors(h, w);
  const std::size_t plane = h * w;
  Tensor d_fused({plane, c, config_.fusion.grid, config_.fusion.grid});
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t f = 0; f < c * g2; ++f) d_fused[p * c * g2 + f] = upstream[(c + f) * plane + p];
  auto d_levels = fuse_pyramid_backward(pyramid, rois, config_.fusion, rroi_fn_, d_fused);
  for (std::size_t i = 0; i < input.size(); ++i) d_levels[0][i] += upstream[i];
  return {build_pyramid_backward(pyramid, pyramid_fn_, std::move(d_levels)), {}};
}

}  // namespace rpdk
