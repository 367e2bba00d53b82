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
#include <string_view>

// Inner-loop kernels with a scalar reference and vector variants chosen at
// runtime. Every variant must agree with the scalar reference: exactly for
// max_first, and to rounding for the accumulating kernels (the vector paths
// reassociate sums and fuse multiply-adds).

namespace rpdk::simd {

enum class Backend { Scalar, Avx2 };

struct KernelTable {
  Backend backend;
  std::string_view name;
  /// sum_i x[i] * y[i]
  double (*dot)(const double* x, const double* y, std::size_t n);
  /// y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  /// sum_i x[i]
  double (*sum)(const double* x, std::size_t n);
  /// largest value and the index of its first occurrence; n >= 1
  void (*max_first)(const double* x, std::size_t n, double* value, std::size_t* index);
};

const KernelTable& scalar_kernels() noexcept;
#if defined(RPDK_HAVE_AVX2)
const KernelTable& avx2_kernels() noexcept;
#endif

bool backend_available(Backend backend) noexcept;

/// Kernels used by the library. Selected once from CPU features, or from the
/// RPDK_SIMD environment variable ("scalar" / "avx2") when set.
const KernelTable& active() noexcept;
Backend active_backend() noexcept;

/// Overrides the runtime choice; throws InvalidHyperparam if unavailable.
/// Call before concurrent work starts.
void set_backend(Backend backend);

const KernelTable& table_for(Backend backend);

}  // namespace rpdk::simd
