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
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rpdk/dacconv.hpp"
#include "rpdk/layer.hpp"
#include "rpdk/mefem.hpp"

namespace rpdk {

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

enum class Tier { Easy, Moderate, Hard };

const char* tier_name(Tier tier) noexcept;
/// easy < 10% covered, moderate 10-35%, hard > 35%.
Tier tier_for(double covered_fraction) noexcept;

struct SceneSpec {
  std::size_t image_size = 64;
  std::size_t num_objects = 3;     // 0..5
  double occlusion_rate = 0.5;     // chance that an object is placed over an earlier one
  double truncation_rate = 0.1;    // chance that an object is clipped by the border
  std::uint64_t seed = 0;
  std::size_t min_size = 0;        // box side range in pixels; 0 picks image_size/8 and image_size/3
  std::size_t max_size = 0;
  double noise = 0.05;             // stddev of the additive Gaussian noise
};

/// Integer pixel box [x, x+w) x [y, y+h).
struct Box {
  double x = 0.0, y = 0.0, w = 0.0, h = 0.0;
  double area() const noexcept { return w * h; }
};

double intersection_area(const Box& a, const Box& b) noexcept;
double iou(const Box& a, const Box& b) noexcept;

struct GroundTruth {
  Box box;          // visible extent, clipped to the image
  Box full;         // extent before clipping
  double covered = 0.0;  // fraction of `full` hidden by later objects or the border
  Tier tier = Tier::Easy;
  double intensity = 0.0;
};

struct Scene {
  Tensor image;  // [1, H, W]
  std::vector<GroundTruth> objects;
  std::uint64_t seed = 0;
};

/// Filled rectangles drawn in order over a zero background, later objects on
/// top, plus Gaussian noise. Pure function of the spec.
Scene generate_scene(const SceneSpec& spec);

/// `count` scenes whose seeds are derived from base.seed and the scene index,
/// so any partition of the index range generates the same set.
std::vector<Scene> generate_scenes(const SceneSpec& base, std::size_t count);

/// Directory of raw little-endian float64 images plus index.json.
void export_scenes(const std::vector<Scene>& scenes, const std::filesystem::path& dir);
std::vector<Scene> import_scenes(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Detector
// ---------------------------------------------------------------------------

enum class SlotType { Standard, Dac, Deformable };

const char* slot_name(SlotType slot) noexcept;
SlotType parse_slot(std::string_view name);

struct DetectorSpec {
  std::vector<SlotType> stages{SlotType::Standard, SlotType::Standard, SlotType::Standard};
  std::size_t in_channels = 1;
  std::size_t width = 8;
  std::size_t dac_depth = 0;        // 0 selects kh*kw
  double dac_noise = 0.0;           // 0 starts every kc at the identity
  std::string pool2d = "max";       // pool after the first stage (2x2, stride 2)
  bool multiscale = false;          // dense ROI fusion before the head
  MultiScaleConfig fusion;
  double anchor = 8.0;              // box size decoded from zero log-size outputs, in pixels
  std::uint64_t seed = 0;
};

struct Detection {
  Box box;
  double score = 0.0;
};

/// Conv stages with ReLU, one replaceable pool after the first stage, an
/// optional multi-scale fusion layer and a 1x1 head producing, per cell of the
/// stride-2 grid, an objectness logit and (dx, dy, log w, log h).
class ToyDetector {
 public:
  explicit ToyDetector(const DetectorSpec& spec);
  /// (standard, dacconv) pair of the spec's architecture computing the same
  /// function at initialization: each standard slot holds the composed kernel
  /// of the matching dacconv slot.
  static std::pair<ToyDetector, ToyDetector> twins(DetectorSpec spec);

  const DetectorSpec& spec() const noexcept { return spec_; }
  Sequential& network() noexcept { return net_; }
  const Sequential& network() const noexcept { return net_; }
  std::size_t stride() const noexcept { return 2; }

  /// Raw head output [5, H/2, W/2].
  Tensor forward(const Tensor& image) const;
  std::vector<Detection> detect(const Tensor& image, double min_score = 0.05) const;

  /// "layer<i>.<kind>.<j>" for every parameter tensor.
  std::vector<std::string> parameter_names() const;

 private:
  ToyDetector(DetectorSpec spec, Sequential net) : spec_(std::move(spec)), net_(std::move(net)) {}

  DetectorSpec spec_;
  Sequential net_;
};

/// Per-cell training targets for one scene. Each object is assigned to the
/// cell holding its centre.
struct Targets {
  std::vector<std::uint8_t> positive;  // [cells]
  Tensor boxes;                        // [4, h, w]
};

Targets make_targets(const Scene& scene, std::size_t grid_h, std::size_t grid_w, std::size_t stride, double anchor);

/// BCE objectness (positive and negative cells averaged separately) plus
/// smooth-L1 box regression averaged over positives, weighted 1:1.
struct LossResult {
  double value = 0.0;
  Tensor grad;  // d value / d head output
};

LossResult detection_loss(const Tensor& head, const Targets& targets);

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 4;
  double max_lr = 0.01;
  double momentum = 0.9;
  double pct_start = 0.3;
  double div_factor = 25.0;
  double final_div_factor = 1e4;
  double grad_clip = 0.0;  // max global L2 norm of the batch gradient; 0 disables
  std::uint64_t seed = 0;  // seeds the shuffling generator
};

/// One-cycle schedule: cosine warm-up from max_lr/div_factor to max_lr over
/// pct_start of the steps, then cosine decay to max_lr/(div_factor*final_div_factor).
double one_cycle_lr(const TrainConfig& config, std::size_t step, std::size_t total_steps);

struct TierCount {
  std::size_t easy = 0, moderate = 0, hard = 0;
};

struct Metrics {
  double ap_easy = 0.0;
  double ap_moderate = 0.0;
  double ap_hard = 0.0;
  TierCount gt;                   // ground-truth objects per tier in the evaluated scenes
  std::size_t scenes_evaluated = 0;
  std::vector<double> loss_curve;  // mean training loss per epoch
  std::optional<std::size_t> epochs_to_converge;
};

/// Mean over r in {0, 0.1, ..., 1} of the best precision at recall >= r.
/// `hits` lists detections in descending score order (true = true positive).
double average_precision_11(const std::vector<bool>& hits, std::size_t num_gt);

/// Greedy matching at IoU 0.5 in descending score order against every object
/// of the scene; a match to an object of another tier is ignored for that
/// tier. Scenes without objects are skipped.
Metrics evaluate_detections(const std::vector<Scene>& scenes, const std::vector<std::vector<Detection>>& detections);
Metrics evaluate(const ToyDetector& detector, const std::vector<Scene>& scenes);

/// Minibatch SGD with momentum under the one-cycle schedule. Returns the loss
/// curve and the evaluation of the trained detector on `eval_set`.
/// Throws DivergedLoss when a batch loss is not finite.
Metrics train(ToyDetector& detector, const TrainConfig& config, const std::vector<Scene>& train_set,
              const std::vector<Scene>& eval_set);
/// Same, shuffling with `rng`, which is left in its final state.
Metrics train(ToyDetector& detector, const TrainConfig& config, const std::vector<Scene>& train_set,
              const std::vector<Scene>& eval_set, std::mt19937_64& rng);

/// First epoch (1-based) from which the loss stays at or below `threshold`
/// for the rest of the curve. The final epoch alone cannot establish that the
/// loss stays there, so it never counts.
std::optional<std::size_t> epochs_to_converge(const std::vector<double>& curve, double threshold);

}  // namespace rpdk
