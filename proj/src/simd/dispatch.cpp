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

#include <atomic>
#include <cstdlib>
#include <string_view>

#include "rpdk/errors.hpp"
#include "rpdk/simd/kernels.hpp"

namespace rpdk::simd {

namespace {

bool cpu_has_avx2() noexcept {
#if defined(RPDK_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable* detect() noexcept {
  const char* env = std::getenv("RPDK_SIMD");
  if (env && std::string_view(env) == "scalar") return &scalar_kernels();
#if defined(RPDK_HAVE_AVX2)
  if (cpu_has_avx2()) return &avx2_kernels();
#endif
  return &scalar_kernels();
}

std::atomic<const KernelTable*>& slot() noexcept {
  static std::atomic<const KernelTable*> table{detect()};
  return table;
}

}  // namespace

bool backend_available(Backend backend) noexcept {
  switch (backend) {
    case Backend::Scalar: return true;
    case Backend::Avx2: return cpu_has_avx2();
  }
  return false;
}

const KernelTable& table_for(Backend backend) {
  require(backend_available(backend), Errc::InvalidHyperparam, "SIMD backend not available on this CPU");
#if defined(RPDK_HAVE_AVX2)
  if (backend == Backend::Avx2) return avx2_kernels();
#endif
  return scalar_kernels();
}

const KernelTable& active() noexcept { return *slot().load(std::memory_order_acquire); }

Backend active_backend() noexcept { return active().backend; }

void set_backend(Backend backend) { slot().store(&table_for(backend), std::memory_order_release); }

}  // namespace rpdk::simd
