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

#include "rpdk/layer.hpp"

#include <cmath>

#include "rpdk/simd/kernels.hpp"

namespace rpdk {

LinearLayer::LinearLayer(Tensor weight) : weight_(std::move(weight)) {
  require(weight_.rank() == 2, Errc::RankMismatch, "linear weight must be rank 2");
}

Tensor LinearLayer::forward(const Tensor& input) const {
  require(input.rank() == 1 && input.dim(0) == weight_.dim(1), Errc::ShapeMismatch,
          "linear input " + shape_to_string(input.shape()) + " vs weight " + shape_to_string(weight_.shape()));
  return matmul(weight_, input.reshape({input.size(), 1})).reshape({weight_.dim(0)});
}

LayerGrad LinearLayer::backward(const Tensor& input, const Tensor& upstream) const {
  require(upstream.shape() == Shape{weight_.dim(0)}, Errc::ShapeMismatch, "linear upstream shape");
  const Tensor up = upstream.reshape({weight_.dim(0), 1});
  const Tensor x = input.reshape({1, input.size()});
  LayerGrad g;
  g.d_input = matmul_tn(weight_, up).reshape({input.size()});
  g.d_params.push_back(matmul(up, x));
  return g;
}

Conv2dLayer::Conv2dLayer(Tensor kernel, ConvParams params, std::optional<Tensor> bias)
    : kernel_(std::move(kernel)), params_(params), bias_(std::move(bias)) {
  require(kernel_.rank() == 4, Errc::RankMismatch, "conv kernel must be rank 4");
  if (bias_) require(bias_->shape() == Shape{kernel_.dim(0)}, Errc::ShapeMismatch, "conv bias length");
}

Tensor Conv2dLayer::forward(const Tensor& input) const {
  Tensor out = conv2d(input, kernel_, params_);
  if (bias_) add_channel_bias(out, *bias_);
  return out;
}

LayerGrad Conv2dLayer::backward(const Tensor& input, const Tensor& upstream) const {
  Conv2dGrads cg = conv2d_backward(input, kernel_, upstream, params_);
  LayerGrad g{std::move(cg.d_input), {}};
  g.d_params.push_back(std::move(cg.d_kernel));
  if (bias_) g.d_params.push_back(channel_sums(upstream));
  return g;
}

std::vector<Tensor*> Conv2dLayer::parameters() {
  std::vector<Tensor*> p{&kernel_};
  if (bias_) p.push_back(&*bias_);
  return p;
}

std::vector<const Tensor*> Conv2dLayer::parameters() const {
  std::vector<const Tensor*> p{&kernel_};
  if (bias_) p.push_back(&*bias_);
  return p;
}

Sequential::Sequential(const Sequential& other) {
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Sequential& Sequential::operator=(const Sequential& other) {
  if (this != &other) *this = Sequential(other);
  return *this;
}

void Sequential::add(std::unique_ptr<Layer> layer) {
  require(layer != nullptr, Errc::InvalidHyperparam, "null layer");
  layers_.push_back(std::move(layer));
}

Tensor Sequential::forward(const Tensor& input) const {
  Tensor x = input;
  for (const auto& l : layers_) x = l->forward(x);
  return x;
}

std::vector<Tensor> Sequential::activations(const Tensor& input) const {
  std::vector<Tensor> acts{input};
  acts.reserve(layers_.size() + 1);
  for (const auto& l : layers_) acts.push_back(l->forward(acts.back()));
  return acts;
}

LayerGrad Sequential::backward(const Tensor& input, const Tensor& upstream) const {
  return backward(activations(input), upstream);
}

LayerGrad Sequential::backward(const std::vector<Tensor>& acts, const Tensor& upstream) const {
  require(acts.size() == layers_.size() + 1, Errc::ShapeMismatch, "one activation per layer plus the output expected");
  std::vector<std::vector<Tensor>> per_layer(layers_.size());
  Tensor grad = upstream;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    LayerGrad g = layers_[i]->backward(acts[i], grad);
    grad = std::move(g.d_input);
    per_layer[i] = std::move(g.d_params);
  }
  LayerGrad out{std::move(grad), {}};
  for (auto& params : per_layer)
    for (auto& t : params) out.d_params.push_back(std::move(t));
  return out;
}

std::vector<Tensor*> Sequential::parameters() {
  std::vector<Tensor*> p;
  for (auto& l : layers_)
    for (auto* t : l->parameters()) p.push_back(t);
  return p;
}

std::vector<const Tensor*> Sequential::parameters() const {
  std::vector<const Tensor*> p;
  for (const auto& l : layers_) {
    const Layer& layer = *l;
    for (const auto* t : layer.parameters()) p.push_back(t);
  }
  return p;
}

Tensor he_uniform(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  return uniform_tensor(shape, -bound, bound, rng);
}

Tensor normal_tensor(const Shape& shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(shape);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

Tensor uniform_tensor(const Shape& shape, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(shape);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

namespace {

double sum_of_squares(const Tensor& t) {
  const auto& kern = simd::active();
  return kern.dot(t.data().data(), t.data().data(), t.size());
}

Tensor numeric_gradient(Layer& layer, const Tensor& input, Tensor& target, double eps) {
  Tensor numeric = Tensor::zeros_like(target);
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double saved = target[i];
    target[i] = saved + eps;
    const double plus = sum_of_squares(layer.forward(input));
    target[i] = saved - eps;
    const double minus = sum_of_squares(layer.forward(input));
    target[i] = saved;
    numeric[i] = (plus - minus) / (2.0 * eps);
  }
  return numeric;
}

}  // namespace

double relative_error(const Tensor& analytic, const Tensor& numeric) {
  require(analytic.shape() == numeric.shape(), Errc::ShapeMismatch, "gradient shapes differ");
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return scale == 0.0 ? 0.0 : diff / scale;
}

GradCheckReport grad_check(Layer& layer, const Tensor& input, const GradCheckOptions& options) {
  require(options.eps > 0.0 && options.eps <= 1e-2, Errc::InvalidHyperparam, "grad_check eps must be in (0, 1e-2]");
  const Tensor y0 = layer.forward(input);
  if (!bit_equal(y0, layer.forward(input)))
    fail(Errc::NonDeterministicLayer, std::string(layer.kind()) + " forward is not deterministic");

  Tensor upstream = y0;
  for (auto& v : upstream.data()) v *= 2.0;
  const LayerGrad analytic = layer.backward(input, upstream);

  GradCheckReport report;
  report.layer = std::string(layer.kind());

  Tensor x = input;
  const Tensor dx = numeric_gradient(layer, x, x, options.eps);
  report.entries.push_back({"input", relative_error(analytic.d_input, dx)});

  auto params = layer.parameters();
  require(params.size() == analytic.d_params.size(), Errc::ShapeMismatch,
          std::string(layer.kind()) + " returned a gradient list of the wrong length");
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor dp = numeric_gradient(layer, input, *params[p], options.eps);
    report.entries.push_back({"param[" + std::to_string(p) + "]", relative_error(analytic.d_params[p], dp)});
  }
  for (const auto& e : report.entries) report.max_rel_err = std::max(report.max_rel_err, e.max_rel_err);
  report.passed = report.max_rel_err < options.tol;
  return report;
}

}  // namespace rpdk
