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

#include "rpdk/ops.hpp"

#include <algorithm>

#include "rpdk/simd/kernels.hpp"

namespace rpdk {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  require(t.rank() == rank, Errc::RankMismatch,
          std::string(what) + " must be rank " + std::to_string(rank) + ", got " + shape_to_string(t.shape()));
}

struct ConvGeometry {
  std::size_t c_in, h, w, c_out, kh, kw, out_h, out_w;
  long stride, pad;

  // Output index range [lo, hi) whose tap at kernel offset k lands inside [0, extent).
  std::pair<std::size_t, std::size_t> valid(std::size_t k, std::size_t extent, std::size_t out_extent) const {
    const long off = static_cast<long>(k) - pad;
    long lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
    long last = static_cast<long>(extent) - 1 - off;
    long hi = last < 0 ? 0 : last / stride + 1;
    lo = std::min<long>(lo, static_cast<long>(out_extent));
    hi = std::clamp<long>(hi, lo, static_cast<long>(out_extent));
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
  }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, const ConvParams& params) {
  require_rank(input, 3, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  require(params.stride > 0, Errc::InvalidHyperparam, "conv2d stride must be positive");
  require(params.padding >= 0, Errc::InvalidHyperparam, "conv2d padding must be non-negative");
  require(kernel.dim(1) == input.dim(0), Errc::ShapeMismatch,
          "kernel " + shape_to_string(kernel.shape()) + " does not match input " + shape_to_string(input.shape()));
  const std::size_t pad2 = 2 * static_cast<std::size_t>(params.padding);
  require(kernel.dim(2) <= input.dim(1) + pad2 && kernel.dim(3) <= input.dim(2) + pad2, Errc::ShapeMismatch,
          "kernel larger than padded input");
  ConvGeometry g{};
  g.c_in = input.dim(0);
  g.h = input.dim(1);
  g.w = input.dim(2);
  g.c_out = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = params.stride;
  g.pad = params.padding;
  g.out_h = conv_out_extent(g.h, g.kh, params);
  g.out_w = conv_out_extent(g.w, g.kw, params);
  return g;
}

std::size_t in_index(std::size_t out, std::size_t k, const ConvGeometry& g) {
  return static_cast<std::size_t>(static_cast<long>(out) * g.stride + static_cast<long>(k) - g.pad);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  require(a.dim(1) == b.dim(0), Errc::ShapeMismatch,
          "matmul inner dimensions " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const auto& kern = simd::active();
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) kern.axpy(a[i * k + p], &b[p * n], &c[i * n], n);
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_tn lhs");
  require_rank(b, 2, "matmul_tn rhs");
  require(a.dim(0) == b.dim(0), Errc::ShapeMismatch, "matmul_tn row counts differ");
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  const auto& kern = simd::active();
  Tensor c({m, n});
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t i = 0; i < m; ++i) kern.axpy(a[p * m + i], &b[p * n], &c[i * n], n);
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt lhs");
  require_rank(b, 2, "matmul_nt rhs");
  require(a.dim(1) == b.dim(1), Errc::ShapeMismatch, "matmul_nt column counts differ");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  const auto& kern = simd::active();
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] = kern.dot(&a[i * k], &b[j * k], k);
  return c;
}

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, const ConvParams& params) {
  require(params.stride > 0, Errc::InvalidHyperparam, "stride must be positive");
  const std::size_t padded = in + 2 * static_cast<std::size_t>(params.padding);
  require(kernel <= padded, Errc::ShapeMismatch, "kernel larger than padded input");
  return (padded - kernel) / static_cast<std::size_t>(params.stride) + 1;
}

Counted<Tensor> conv2d_counted(const Tensor& input, const Tensor& kernel, const ConvParams& params) {
  const ConvGeometry g = conv_geometry(input, kernel, params);
  const auto& kern = simd::active();
  Tensor out({g.c_out, g.out_h, g.out_w});
  OpCounter ops;
  const double* in = input.data().data();
  for (std::size_t o = 0; o < g.c_out; ++o) {
    double* out_plane = &out[o * g.out_h * g.out_w];
    for (std::size_t c = 0; c < g.c_in; ++c) {
      const double* in_plane = in + c * g.h * g.w;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const auto [oy_lo, oy_hi] = g.valid(ky, g.h, g.out_h);
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const auto [ox_lo, ox_hi] = g.valid(kx, g.w, g.out_w);
          const double weight = kernel[((o * g.c_in + c) * g.kh + ky) * g.kw + kx];
          const std::size_t len = ox_hi - ox_lo;
          if (len == 0) continue;
          for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
            const double* in_row = in_plane + in_index(oy, ky, g) * g.w;
            double* out_row = out_plane + oy * g.out_w;
            if (g.stride == 1) {
              kern.axpy(weight, in_row + in_index(ox_lo, kx, g), out_row + ox_lo, len);
            } else {
              for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) out_row[ox] += weight * in_row[in_index(ox, kx, g)];
            }
          }
          ops.multiplies += len * (oy_hi - oy_lo);
        }
      }
    }
  }
  ops.adds = ops.multiplies;
  validate_finite(out, "conv2d");
  return {std::move(out), ops};
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const ConvParams& params) {
  return conv2d_counted(input, kernel, params).value;
}

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& upstream,
                            const ConvParams& params) {
  const ConvGeometry g = conv_geometry(input, kernel, params);
  require(upstream.shape() == Shape{g.c_out, g.out_h, g.out_w}, Errc::ShapeMismatch,
          "upstream gradient " + shape_to_string(upstream.shape()) + " does not match conv output");
  const auto& kern = simd::active();
  Conv2dGrads grads{Tensor::zeros_like(input), Tensor::zeros_like(kernel)};
  for (std::size_t o = 0; o < g.c_out; ++o) {
    const double* up_plane = &upstream[o * g.out_h * g.out_w];
    for (std::size_t c = 0; c < g.c_in; ++c) {
      const double* in_plane = &input[c * g.h * g.w];
      double* din_plane = &grads.d_input[c * g.h * g.w];
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const auto [oy_lo, oy_hi] = g.valid(ky, g.h, g.out_h);
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const auto [ox_lo, ox_hi] = g.valid(kx, g.w, g.out_w);
          const std::size_t kidx = ((o * g.c_in + c) * g.kh + ky) * g.kw + kx;
          const double weight = kernel[kidx];
          const std::size_t len = ox_hi - ox_lo;
          if (len == 0) continue;
          double acc = 0.0;
          for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
            const std::size_t row = in_index(oy, ky, g) * g.w;
            const double* up_row = up_plane + oy * g.out_w;
            if (g.stride == 1) {
              const std::size_t ix = in_index(ox_lo, kx, g);
              acc += kern.dot(up_row + ox_lo, in_plane + row + ix, len);
              kern.axpy(weight, up_row + ox_lo, din_plane + row + ix, len);
            } else {
              for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                const std::size_t ix = in_index(ox, kx, g);
                acc += up_row[ox] * in_plane[row + ix];
                din_plane[row + ix] += weight * up_row[ox];
              }
            }
          }
          grads.d_kernel[kidx] = acc;
        }
      }
    }
  }
  return grads;
}

void add_channel_bias(Tensor& t, const Tensor& bias) {
  require_rank(t, 3, "bias target");
  require(bias.size() == t.dim(0), Errc::ShapeMismatch, "bias length differs from channel count");
  const std::size_t plane = t.dim(1) * t.dim(2);
  for (std::size_t c = 0; c < t.dim(0); ++c)
    for (std::size_t i = 0; i < plane; ++i) t[c * plane + i] += bias[c];
}

Tensor channel_sums(const Tensor& t) {
  require_rank(t, 3, "channel_sums input");
  const std::size_t plane = t.dim(1) * t.dim(2);
  const auto& kern = simd::active();
  Tensor sums({t.dim(0)});
  for (std::size_t c = 0; c < t.dim(0); ++c) sums[c] = kern.sum(&t[c * plane], plane);
  return sums;
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& upstream) {
  require(x.shape() == upstream.shape(), Errc::ShapeMismatch, "relu upstream shape differs");
  Tensor d = upstream;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (!(x[i] > 0.0)) d[i] = 0.0;
  return d;
}

}  // namespace rpdk
