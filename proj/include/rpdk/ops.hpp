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

#include "rpdk/op_counter.hpp"
#include "rpdk/tensor.hpp"

namespace rpdk {

/// Standard matrix product of two rank-2 tensors.
Tensor matmul(const Tensor& a, const Tensor& b);

/// a^T b and a b^T without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);

struct ConvParams {
  int stride = 1;
  int padding = 0;  // zero padding on every border
};

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, const ConvParams& params);

/// input [C_in,H,W], kernel [C_out,C_in,Kh,Kw] -> [C_out,H',W'].
/// out(o,y,x) = sum over (c,ky,kx) of in(c, y*s+ky-p, x*s+kx-p) * k(o,c,ky,kx),
/// accumulated in (c,ky,kx) order for every output element.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const ConvParams& params = {});

/// Same result; multiplies/adds count the taps that land inside the input
/// (padding taps are skipped, not multiplied by zero).
Counted<Tensor> conv2d_counted(const Tensor& input, const Tensor& kernel, const ConvParams& params = {});

struct Conv2dGrads {
  Tensor d_input;
  Tensor d_kernel;
};

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& upstream,
                            const ConvParams& params = {});

/// Adds bias[c] to every element of channel c of a [C,H,W] tensor.
void add_channel_bias(Tensor& t, const Tensor& bias);
/// Per-channel sum of a [C,H,W] tensor (bias gradient).
Tensor channel_sums(const Tensor& t);

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& upstream);

}  // namespace rpdk
