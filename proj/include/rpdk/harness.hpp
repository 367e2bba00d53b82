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
#include <functional>
#include <iosfwd>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "rpdk/detect.hpp"

namespace rpdk {

const char* library_version() noexcept;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  struct Model {
    std::vector<std::string> stages{"standard", "standard", "standard"};
    std::size_t width = 8;
    std::size_t dac_depth = 36;
    double anchor = 8.0;
    bool operator==(const Model&) const = default;
  } model;

  struct Pools {
    std::string pool3d = "max";
    std::string pool2d = "max";
    std::string rroi = "max";
    std::string pyramid = "avg";
    bool operator==(const Pools&) const = default;
  } pools;

  struct Mefem {
    int k0 = 4;
    std::size_t pyramid_depth = 4;
    std::size_t grid = 2;
    double anchor = 4.0;
    double reference = 224.0;
    bool operator==(const Mefem&) const = default;
  } mefem;

  struct Data {
    std::size_t image_size = 32;
    std::size_t num_objects = 3;
    double occlusion_rate = 0.5;
    double truncation_rate = 0.1;
    double noise = 0.05;
    std::size_t train_scenes = 128;
    std::size_t eval_scenes = 128;
    bool operator==(const Data&) const = default;
  } data;

  struct Train {
    std::size_t epochs = 30;
    std::size_t batch_size = 4;
    double max_lr = 0.01;
    double momentum = 0.9;
    double pct_start = 0.3;
    double grad_clip = 2.0;
    double converge_factor = 1.10;
    bool operator==(const Train&) const = default;
  } train;

  struct Bench {
    std::vector<std::size_t> n{64, 100, 256};
    std::vector<std::size_t> rotations{2, 4, 8};
    std::size_t voxels = 16;
    bool operator==(const Bench&) const = default;
  } bench;

  struct GradCheck {
    std::vector<std::string> layers{"linear",   "relu",     "conv2d",      "dacconv",   "pool_max",
                                    "pool_avg", "pool_lp",  "pool_soft",   "deform_conv", "rroi_pool",
                                    "fusion",   "eaconv"};
    double eps = 1e-6;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    bool operator==(const GradCheck&) const = default;
  } gradcheck;

  struct Eval {
    std::string checkpoint_dir;  // empty: train within the command
    bool operator==(const Eval&) const = default;
  } eval;

  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string out_dir = "out";

  bool operator==(const ExperimentConfig&) const = default;
};

/// Every key is optional; unknown keys at any level raise InvalidConfig.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Range and registry checks; raises InvalidConfig or UnknownPoolFn.
void validate_config(const ExperimentConfig& config);
/// FNV-1a 64 of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

DetectorSpec baseline_spec(const ExperimentConfig& config, std::uint64_t seed);
/// First stage kept, later stages deformable, dense multi-scale fusion before the head.
DetectorSpec mefem_spec(const ExperimentConfig& config, std::uint64_t seed);
SceneSpec scene_spec(const ExperimentConfig& config, std::uint64_t seed);
TrainConfig train_config(const ExperimentConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct ParamRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// Binary layout: "RPDKCKPT", u32 format version, u64 header length, a JSON
/// header {config, rng, params: [{name, shape}]}, then every parameter's
/// values as little-endian float64 in header order.
struct Checkpoint {
  std::uint32_t version = 1;
  nlohmann::json config;
  std::string rng_state;
  std::vector<ParamRecord> params;
};

Checkpoint make_checkpoint(const ToyDetector& detector, const ExperimentConfig& config, const std::mt19937_64& rng);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
/// MissingCheckpoint if the file does not exist; CheckpointMismatch if it is malformed.
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Copies the stored values into the detector; names and shapes must match exactly.
void restore(const Checkpoint& checkpoint, ToyDetector& detector);
std::mt19937_64 restore_rng(const Checkpoint& checkpoint);

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// One layer type under gradient check: builds the layer and its input for a seed.
struct GradCheckCase {
  std::string name;
  double tol = 1e-4;
  std::function<std::pair<std::unique_ptr<Layer>, Tensor>(std::uint64_t seed)> make;
};

class LayerRegistry {
 public:
  /// Replaces an existing case of the same name.
  void add(GradCheckCase c);
  const GradCheckCase& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::vector<std::string> names() const;

 private:
  std::vector<GradCheckCase> cases_;
};

/// Every differentiable layer type of the library. Bilinear-sampling layers
/// use the looser 1e-3 tolerance; everything else 1e-4.
LayerRegistry default_layer_registry();

/// Outcome of one command: the report written to disk and the exit code.
struct CommandResult {
  int exit_code = 0;
  nlohmann::json report;
};

CommandResult cmd_gradcheck(const ExperimentConfig& config, const LayerRegistry& registry, std::ostream& log);
CommandResult cmd_bench_rp(const ExperimentConfig& config, std::ostream& log);
CommandResult cmd_train_compare(const ExperimentConfig& config, std::ostream& log);
CommandResult cmd_eval_occlusion(const ExperimentConfig& config, std::ostream& log);
/// Reads the train-compare and eval-occlusion reports from out_dir and writes
/// loss_curves.csv and ap_bars.csv next to them.
CommandResult cmd_export_plots(const ExperimentConfig& config, std::ostream& log);

/// Median of a non-empty list (mean of the middle pair for even sizes).
double median(std::vector<double> values);

}  // namespace rpdk
