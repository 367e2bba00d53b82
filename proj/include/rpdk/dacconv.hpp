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

#include <optional>
#include <random>

#include "rpdk/layer.hpp"
#include "rpdk/op_counter.hpp"
#include "rpdk/ops.hpp"

namespace rpdk {

/// Two-factor convolution kernel. For every input channel c the standard
/// kernel slice K[:, c] (C_out x S, S = kh*kw) is kf[c] (C_out x D) times
/// kc[c] (D x S).
struct DacKernelPair {
  Tensor kc;  // [C_in, D, S]  channel-based factor
  Tensor kf;  // [C_in, C_out, D]  feature-map-based factor
  std::size_t kh = 0;
  std::size_t kw = 0;

  std::size_t c_in() const { return kc.dim(0); }
  std::size_t depth() const { return kc.dim(1); }
  std::size_t taps() const { return kc.dim(2); }
  std::size_t c_out() const { return kf.dim(1); }
};

void validate_pair(const DacKernelPair& pair);

/// Composed kernel [C_out, C_in, kh, kw] with the cost of the per-channel products.
Counted<Tensor> compose_counted(const DacKernelPair& pair);
Tensor compose(const DacKernelPair& pair);

/// kc[c] = I (D x S, ones on the leading diagonal) + N(0, noise^2); kf He-uniform
/// over fan-in C_in*kh*kw. depth 0 selects D = kh*kw.
DacKernelPair init_dac_pair(std::size_t c_in, std::size_t c_out, std::size_t kh, std::size_t kw, std::size_t depth,
                            std::mt19937_64& rng, double noise = 0.01);

/// Pair with identity kc (D = S) whose kf carries `kernel` exactly, so that
/// compose(pair) reproduces `kernel` bit-for-bit.
DacKernelPair pair_from_kernel(const Tensor& kernel);

class DacLayer final : public Layer {
 public:
  DacLayer(DacKernelPair pair, ConvParams params);

  std::string_view kind() const override { return "dacconv"; }

  /// conv2d(input, compose(pair)); uses the folded kernel when present. With
  /// debug validation on, a fold whose source factors changed raises StaleFold.
  Tensor forward(const Tensor& input) const override;
  /// Forward cost excluding any fold.
  Counted<Tensor> forward_counted(const Tensor& input) const;

  /// d_params = {d_kc, d_kf}, chained through the composition:
  /// d_kf[c] = dK[c] kc[c]^T and d_kc[c] = kf[c]^T dK[c].
  LayerGrad backward(const Tensor& input, const Tensor& upstream) const override;

  /// Drops any fold: the caller may write through the returned pointers.
  std::vector<Tensor*> parameters() override;
  std::vector<const Tensor*> parameters() const override { return {&pair_.kc, &pair_.kf}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<DacLayer>(*this); }

  /// Caches compose(pair) for inference. Explicit so that op counts stay reproducible.
  void fold();
  void unfold() noexcept;
  bool folded() const noexcept { return folded_.has_value(); }
  const std::optional<Tensor>& folded_kernel() const noexcept { return folded_; }

  /// Cost of one composition; independent of input size.
  OpCounter fold_cost() const;

  const DacKernelPair& pair() const noexcept { return pair_; }
  const ConvParams& params() const noexcept { return params_; }

 private:
  Tensor kernel() const;

  DacKernelPair pair_;
  ConvParams params_;
  std::optional<Tensor> folded_;
  std::optional<DacKernelPair> fold_source_;
};

Tensor dac_forward(const DacLayer& layer, const Tensor& input);
LayerGrad dac_backward(const DacLayer& layer, const Tensor& input, const Tensor& upstream);
OpCounter fold_cost(const DacLayer& layer);

}  // namespace rpdk
