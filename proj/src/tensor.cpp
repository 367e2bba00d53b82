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

#include "rpdk/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>

namespace rpdk {

namespace {

#ifdef NDEBUG
std::atomic<bool> g_debug_validation{false};
#else
std::atomic<bool> g_debug_validation{true};
#endif

}  // namespace

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::RankMismatch: return "RankMismatch";
    case Errc::InvalidHyperparam: return "InvalidHyperparam";
    case Errc::NonDeterministicLayer: return "NonDeterministicLayer";
    case Errc::NonFinite: return "NonFinite";
    case Errc::DuplicateName: return "DuplicateName";
    case Errc::UnknownPoolFn: return "UnknownPoolFn";
    case Errc::EmptyVoxel: return "EmptyVoxel";
    case Errc::WindowTooLarge: return "WindowTooLarge";
    case Errc::NonUnitLiftedAxis: return "NonUnitLiftedAxis";
    case Errc::StaleFold: return "StaleFold";
    case Errc::DegenerateRoi: return "DegenerateRoi";
    case Errc::InvalidSpec: return "InvalidSpec";
    case Errc::DivergedLoss: return "DivergedLoss";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::MissingCheckpoint: return "MissingCheckpoint";
    case Errc::CheckpointMismatch: return "CheckpointMismatch";
    case Errc::IoError: return "IoError";
  }
  return "Unknown";
}

bool debug_validation() noexcept { return g_debug_validation.load(std::memory_order_relaxed); }
void set_debug_validation(bool enabled) noexcept {
  g_debug_validation.store(enabled, std::memory_order_relaxed);
}

std::size_t shape_volume(const Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto extent : shape_) require(extent > 0, Errc::ShapeMismatch, "zero extent in " + shape_to_string(shape_));
  data_.assign(shape_volume(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto extent : shape_) require(extent > 0, Errc::ShapeMismatch, "zero extent in " + shape_to_string(shape_));
  require(shape_volume(shape_) == data_.size(), Errc::ShapeMismatch,
          "shape " + shape_to_string(shape_) + " holds " + std::to_string(shape_volume(shape_)) +
              " values, got " + std::to_string(data_.size()));
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  require(index.size() == shape_.size(), Errc::RankMismatch, "index rank differs from tensor rank");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    require(i < shape_[axis], Errc::ShapeMismatch, "index out of range");
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return flat;
}

double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

Tensor Tensor::reshape(const Shape& new_shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshape(new_shape);
}

Tensor Tensor::reshape(const Shape& new_shape) && {
  require(shape_volume(new_shape) == data_.size(), Errc::ShapeMismatch,
          "cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(new_shape));
  for (auto extent : new_shape) require(extent > 0, Errc::ShapeMismatch, "zero extent in reshape");
  shape_ = new_shape;
  return std::move(*this);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor reshape(const Tensor& t, const Shape& new_shape) { return t.reshape(new_shape); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), Errc::ShapeMismatch,
          "max_abs_diff on " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

bool bit_equal(const Tensor& a, const Tensor& b) noexcept {
  if (a.shape() != b.shape()) return false;
  return a.size() == 0 || std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

void validate_finite(const Tensor& t, const char* where) {
  if (debug_validation() && !t.all_finite()) fail(Errc::NonFinite, std::string("non-finite output from ") + where);
}

}  // namespace rpdk
