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

#include <cstdint>
#include <utility>

namespace rpdk {

/// Tally of primitive operations performed by one call. Cost model:
///   compares    - one per max/min candidate examined
///   adds        - one per accumulation
///   multiplies  - one per product or normalizing scale
///   moves       - one per element copied or initialized (metadata changes cost nothing)
struct OpCounter {
  std::uint64_t compares = 0;
  std::uint64_t adds = 0;
  std::uint64_t multiplies = 0;
  std::uint64_t moves = 0;

  std::uint64_t total() const noexcept { return compares + adds + multiplies + moves; }

  OpCounter& operator+=(const OpCounter& other) noexcept {
    compares += other.compares;
    adds += other.adds;
    multiplies += other.multiplies;
    moves += other.moves;
    return *this;
  }
  friend OpCounter operator+(OpCounter a, const OpCounter& b) noexcept { return a += b; }
  friend bool operator==(const OpCounter&, const OpCounter&) = default;
};

/// A result paired with the operations it cost.
template <class T>
struct Counted {
  T value;
  OpCounter ops;
};

/// Tracks live and peak bytes of transient buffers inside one invocation.
class AllocTracker {
 public:
  void acquire(std::uint64_t bytes) noexcept {
    live_ += bytes;
    if (live_ > peak_) peak_ = live_;
  }
  void release(std::uint64_t bytes) noexcept { live_ -= bytes; }

  std::uint64_t live() const noexcept { return live_; }
  std::uint64_t peak() const noexcept { return peak_; }

 private:
  std::uint64_t live_ = 0;
  std::uint64_t peak_ = 0;
};

/// RAII registration of a buffer with an AllocTracker.
class TrackedBytes {
 public:
  TrackedBytes(AllocTracker& tracker, std::uint64_t bytes) noexcept : tracker_(&tracker), bytes_(bytes) {
    tracker_->acquire(bytes_);
  }
  TrackedBytes(const TrackedBytes&) = delete;
  TrackedBytes& operator=(const TrackedBytes&) = delete;
  TrackedBytes(TrackedBytes&& other) noexcept
      : tracker_(std::exchange(other.tracker_, nullptr)), bytes_(other.bytes_) {}
  TrackedBytes& operator=(TrackedBytes&&) = delete;
  ~TrackedBytes() {
    if (tracker_) tracker_->release(bytes_);
  }

 private:
  AllocTracker* tracker_;
  std::uint64_t bytes_;
};

}  // namespace rpdk
