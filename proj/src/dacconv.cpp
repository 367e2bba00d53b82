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

#include "rpdk/dacconv.hpp"

#include "rpdk/simd/kernels.hpp"

namespace rpdk {

void validate_pair(const DacKernelPair& pair) {
  require(pair.kc.rank() == 3, Errc::ShapeMismatch, "kc must be [C_in, D, S]");
  require(pair.kf.rank() == 3, Errc::ShapeMismatch, "kf must be [C_in, C_out, D]");
  require(pair.kh >= 1 && pair.kw >= 1, Errc::ShapeMismatch, "spatial kernel extents must be positive");
  require(pair.taps() == pair.kh * pair.kw, Errc::ShapeMismatch, "kc spatial axis must equal kh*kw");
  require(pair.kf.dim(0) == pair.c_in(), Errc::ShapeMismatch, "kc and kf disagree on C_in");
  require(pair.kf.dim(2) == pair.depth(), Errc::ShapeMismatch, "kc and kf disagree on D");
}

Counted<Tensor> compose_counted(const DacKernelPair& pair) {
  validate_pair(pair);
  const std::size_t c_in = pair.c_in(), c_out = pair.c_out(), d = pair.depth(), s = pair.taps();
  const auto& kern = simd::active();
  Tensor kernel({c_out, c_in, pair.kh, pair.kw});
  std::vector<double> slice(c_out * s);
  for (std::size_t c = 0; c < c_in; ++c) {
    std::fill(slice.begin(), slice.end(), 0.0);
    const double* kf = &pair.kf[c * c_out * d];
    const double* kc = &pair.kc[c * d * s];
    for (std::size_t o = 0; o < c_out; ++o)
      for (std::size_t j = 0; j < d; ++j) kern.axpy(kf[o * d + j], kc + j * s, &slice[o * s], s);
    for (std::size_t o = 0; o < c_out; ++o)
      std::copy_n(&slice[o * s], s, &kernel[(o * c_in + c) * s]);
  }
  OpCounter ops;
  ops.multiplies = c_in * c_out * d * s;
  ops.adds = ops.multiplies;
  ops.moves = c_in * c_out * s;
  return {std::move(kernel), ops};
}

Tensor compose(const DacKernelPair& pair) { return compose_counted(pair).value; }

DacKernelPair init_dac_pair(std::size_t c_in, std::size_t c_out, std::size_t kh, std::size_t kw, std::size_t depth,
                            std::mt19937_64& rng, double noise) {
  const std::size_t s = kh * kw;
  const std::size_t d = depth == 0 ? s : depth;
  DacKernelPair pair;
  pair.kh = kh;
  pair.kw = kw;
  pair.kc = noise > 0.0 ? normal_tensor({c_in, d, s}, noise, rng) : Tensor({c_in, d, s});
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t j = 0; j < std::min(d, s); ++j) pair.kc[(c * d + j) * s + j] += 1.0;
  pair.kf = he_uniform({c_in, c_out, d}, c_in * s, rng);
  return pair;
}

DacKernelPair pair_from_kernel(const Tensor& kernel) {
  require(kernel.rank() == 4, Errc::ShapeMismatch, "kernel must be [C_out, C_in, kh, kw]");
  const std::size_t c_out = kernel.dim(0), c_in = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  const std::size_t s = kh * kw;
  DacKernelPair pair{Tensor({c_in, s, s}), Tensor({c_in, c_out, s}), kh, kw};
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t j = 0; j < s; ++j) pair.kc[(c * s + j) * s + j] = 1.0;
    for (std::size_t o = 0; o < c_out; ++o)
      for (std::size_t j = 0; j < s; ++j) pair.kf[(c * c_out + o) * s + j] = kernel[(o * c_in + c) * s + j];
  }
  return pair;
}

DacLayer::DacLayer(DacKernelPair pair, ConvParams params) : pair_(std::move(pair)), params_(params) {
  validate_pair(pair_);
}

Tensor DacLayer::kernel() const {
  if (!folded_) return compose(pair_);
  if (debug_validation() && (!bit_equal(fold_source_->kc, pair_.kc) || !bit_equal(fold_source_->kf, pair_.kf)))
    fail(Errc::StaleFold, "dacconv factors changed after fold()");
  return *folded_;
}

Tensor DacLayer::forward(const Tensor& input) const { return conv2d(input, kernel(), params_); }

Counted<Tensor> DacLayer::forward_counted(const Tensor& input) const {
  return conv2d_counted(input, kernel(), params_);
}

LayerGrad DacLayer::backward(const Tensor& input, const Tensor& upstream) const {
  const Tensor k = kernel();
  Conv2dGrads cg = conv2d_backward(input, k, upstream, params_);

  const std::size_t c_in = pair_.c_in(), c_out = pair_.c_out(), d = pair_.depth(), s = pair_.taps();
  Tensor d_kc = Tensor::zeros_like(pair_.kc);
  Tensor d_kf = Tensor::zeros_like(pair_.kf);
  Tensor dk_slice({c_out, s});
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t o = 0; o < c_out; ++o)
      std::copy_n(&cg.d_kernel[(o * c_in + c) * s], s, &dk_slice[o * s]);
    const Tensor kf_c({c_out, d}, {&pair_.kf[c * c_out * d], &pair_.kf[c * c_out * d] + c_out * d});
    const Tensor kc_c({d, s}, {&pair_.kc[c * d * s], &pair_.kc[c * d * s] + d * s});
    const Tensor dkf_c = matmul_nt(dk_slice, kc_c);
    const Tensor dkc_c = matmul_tn(kf_c, dk_slice);
    std::copy(dkf_c.data().begin(), dkf_c.data().end(), &d_kf[c * c_out * d]);
    std::copy(dkc_c.data().begin(), dkc_c.data().end(), &d_kc[c * d * s]);
  }
  LayerGrad g{std::move(cg.d_input), {}};
  g.d_params.push_back(std::move(d_kc));
  g.d_params.push_back(std::move(d_kf));
  return g;
}

std::vector<Tensor*> DacLayer::parameters() {
  unfold();
  return {&pair_.kc, &pair_.kf};
}

void DacLayer::fold() {
  folded_ = compose(pair_);
  fold_source_ = pair_;
}

void DacLayer::unfold() noexcept {
  folded_.reset();
  fold_source_.reset();
}

OpCounter DacLayer::fold_cost() const { return compose_counted(pair_).ops; }

Tensor dac_forward(const DacLayer& layer, const Tensor& input) { return layer.forward(input); }
LayerGrad dac_backward(const DacLayer& layer, const Tensor& input, const Tensor& upstream) {
  return layer.backward(input, upstream);
}
OpCounter fold_cost(const DacLayer& layer) { return layer.fold_cost(); }

}  // namespace rpdk
