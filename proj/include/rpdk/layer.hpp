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

#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "rpdk/ops.hpp"
#include "rpdk/tensor.hpp"

namespace rpdk {

/// Gradient of a scalar loss with respect to a layer's input and parameters.
/// d_params follows the order of Layer::parameters().
struct LayerGrad {
  Tensor d_input;
  std::vector<Tensor> d_params;
};

/// Forward/backward contract shared by every differentiable layer.
/// backward() recomputes whatever forward state it needs from `input`.
class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string_view kind() const = 0;
  virtual Tensor forward(const Tensor& input) const = 0;
  virtual LayerGrad backward(const Tensor& input, const Tensor& upstream) const = 0;

  /// Mutable view of the trainable tensors. Callers may write through the
  /// pointers; layers that cache derived state drop it here.
  virtual std::vector<Tensor*> parameters() = 0;
  virtual std::vector<const Tensor*> parameters() const = 0;

  virtual std::unique_ptr<Layer> clone() const = 0;
};

class LinearLayer final : public Layer {
 public:
  explicit LinearLayer(Tensor weight);  // [out, in]; input is [in]

  std::string_view kind() const override { return "linear"; }
  Tensor forward(const Tensor& input) const override;
  LayerGrad backward(const Tensor& input, const Tensor& upstream) const override;
  std::vector<Tensor*> parameters() override { return {&weight_}; }
  std::vector<const Tensor*> parameters() const override { return {&weight_}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<LinearLayer>(*this); }

 private:
  Tensor weight_;
};

class Conv2dLayer final : public Layer {
 public:
  Conv2dLayer(Tensor kernel, ConvParams params, std::optional<Tensor> bias = std::nullopt);

  std::string_view kind() const override { return "conv2d"; }
  Tensor forward(const Tensor& input) const override;
  LayerGrad backward(const Tensor& input, const Tensor& upstream) const override;
  std::vector<Tensor*> parameters() override;
  std::vector<const Tensor*> parameters() const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2dLayer>(*this); }

  const Tensor& kernel() const noexcept { return kernel_; }
  const ConvParams& params() const noexcept { return params_; }

 private:
  Tensor kernel_;
  ConvParams params_;
  std::optional<Tensor> bias_;
};

class ReluLayer final : public Layer {
 public:
  std::string_view kind() const override { return "relu"; }
  Tensor forward(const Tensor& input) const override { return relu(input); }
  LayerGrad backward(const Tensor& input, const Tensor& upstream) const override {
    return {relu_backward(input, upstream), {}};
  }
  std::vector<Tensor*> parameters() override { return {}; }
  std::vector<const Tensor*> parameters() const override { return {}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReluLayer>(*this); }
};

/// Layers applied in order. backward() reruns the forward chain to recover the
/// intermediate activations.
class Sequential final : public Layer {
 public:
  Sequential() = default;
  Sequential(const Sequential& other);
  Sequential& operator=(const Sequential& other);
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  void add(std::unique_ptr<Layer> layer);
  std::size_t size() const noexcept { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_.at(i); }
  const Layer& layer(std::size_t i) const { return *layers_.at(i); }

  std::string_view kind() const override { return "sequential"; }
  Tensor forward(const Tensor& input) const override;
  /// Output of every layer; activations[i] is the input of layer i, the last
  /// entry is the network output.
  std::vector<Tensor> activations(const Tensor& input) const;
  LayerGrad backward(const Tensor& input, const Tensor& upstream) const override;
  LayerGrad backward(const std::vector<Tensor>& activations, const Tensor& upstream) const;
  std::vector<Tensor*> parameters() override;
  std::vector<const Tensor*> parameters() const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Sequential>(*this); }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// Uniform fan-in (He) initialization: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
Tensor he_uniform(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng);
Tensor normal_tensor(const Shape& shape, double stddev, std::mt19937_64& rng);
Tensor uniform_tensor(const Shape& shape, double lo, double hi, std::mt19937_64& rng);

struct GradCheckOptions {
  double eps = 1e-6;
  double tol = 1e-4;
};

struct GradCheckEntry {
  std::string tensor;  // "input" or "param[i]"
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::string layer;
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  bool passed = false;
};

/// Central finite differences of L = sum(y^2) against the analytic gradient.
/// Error per tensor is max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|), and
/// zero when both gradients vanish. Throws NonDeterministicLayer if two
/// forward calls on the same input are not bit-identical.
GradCheckReport grad_check(Layer& layer, const Tensor& input, const GradCheckOptions& options = {});

/// Relative error measure used by grad_check.
double relative_error(const Tensor& analytic, const Tensor& numeric);

}  // namespace rpdk
