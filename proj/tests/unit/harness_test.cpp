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

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include "rpdk/dacconv.hpp"
#include "rpdk/harness.hpp"

using namespace rpdk;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

template <class F>
Errc error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no rpdk::Error raised";
  return Errc::IoError;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag)
      : path_(fs::temp_directory_path() / ("rpdk_" + tag + "_" + std::to_string(std::random_device{}()))) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig c;
  c.model.stages = {"standard", "standard"};
  c.model.width = 4;
  c.model.dac_depth = 0;
  c.data.image_size = 16;
  c.data.train_scenes = 8;
  c.data.eval_scenes = 6;
  c.train.epochs = 2;
  c.seeds = {1, 2, 3};
  c.mefem.pyramid_depth = 2;
  c.bench.n = {4, 40};
  c.bench.rotations = {2};
  c.bench.voxels = 2;
  c.gradcheck.seeds = {1};
  c.out_dir = out.string();
  return c;
}

// DacLayer whose backward returns the negated gradient.
class SignFlippedDac final : public Layer {
 public:
  explicit SignFlippedDac(DacLayer inner) : inner_(std::move(inner)) {}
  std::string_view kind() const override { return "dacconv"; }
  Tensor forward(const Tensor& input) const override { return inner_.forward(input); }
  LayerGrad backward(const Tensor& input, const Tensor& upstream) const override {
    LayerGrad g = inner_.backward(input, upstream);
    for (Tensor* t : {&g.d_input, &g.d_params[0], &g.d_params[1]})
      for (auto& v : t->data()) v = -v;
    return g;
  }
  std::vector<Tensor*> parameters() override { return inner_.parameters(); }
  std::vector<const Tensor*> parameters() const override { return inner_.parameters(); }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<SignFlippedDac>(*this); }

 private:
  DacLayer inner_;
};

}  // namespace

TEST(Config, DefaultsRoundTrip) {
  const ExperimentConfig c;
  EXPECT_EQ(config_from_json(config_to_json(c)), c);
  EXPECT_EQ(config_to_json(config_from_json(config_to_json(c))), config_to_json(c));
  EXPECT_NO_THROW(validate_config(c));
}

TEST(Config, EditedConfigRoundTrips) {
  ExperimentConfig c;
  c.model.stages = {"dacconv", "deformable"};
  c.pools.pool2d = "soft";
  c.mefem.k0 = -2;
  c.train.max_lr = 0.0375;
  c.seeds = {7, 8};
  c.eval.checkpoint_dir = "ck";
  EXPECT_EQ(config_from_json(config_to_json(c)), c);
  EXPECT_NE(config_hash(c), config_hash(ExperimentConfig{}));
  EXPECT_EQ(config_hash(c), config_hash(config_from_json(config_to_json(c))));
  EXPECT_EQ(config_hash(c).size(), 16u);
}

TEST(Config, PartialJsonKeepsDefaults) {
  const ExperimentConfig c = config_from_json(json{{"train", {{"epochs", 3}}}});
  EXPECT_EQ(c.train.epochs, 3u);
  EXPECT_EQ(c.train.batch_size, ExperimentConfig{}.train.batch_size);
  EXPECT_EQ(c.model, ExperimentConfig{}.model);
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_EQ(error_of([] { (void)config_from_json(json{{"epochs", 3}}); }), Errc::InvalidConfig);
  EXPECT_EQ(error_of([] { (void)config_from_json(json{{"train", {{"epoch", 3}}}}); }), Errc::InvalidConfig);
  EXPECT_EQ(error_of([] { (void)config_from_json(json{{"train", {{"epochs", -3}}}}); }), Errc::InvalidConfig);
  EXPECT_EQ(error_of([] { (void)config_from_json(json{{"seeds", "1"}}); }), Errc::InvalidConfig);
  EXPECT_EQ(error_of([] { (void)config_from_json(json::array()); }), Errc::InvalidConfig);
}

TEST(Config, ValidationErrors) {
  ExperimentConfig c;
  c.pools.pool3d = "median";
  EXPECT_EQ(error_of([&] { validate_config(c); }), Errc::UnknownPoolFn);
  c = {};
  c.model.stages = {"standard", "capsule"};
  EXPECT_EQ(error_of([&] { validate_config(c); }), Errc::InvalidConfig);
  c = {};
  c.data.image_size = 15;
  EXPECT_EQ(error_of([&] { validate_config(c); }), Errc::InvalidConfig);
  c = {};
  c.seeds.clear();
  EXPECT_EQ(error_of([&] { validate_config(c); }), Errc::InvalidConfig);
}

TEST(Config, LoadFromFile) {
  TempDir dir("cfg");
  {
    std::ofstream(dir.path() / "c.json") << R"({"model": {"width": 6}, "out_dir": "x"})";
    std::ofstream(dir.path() / "bad.json") << "{ not json";
  }
  const ExperimentConfig c = load_config(dir.path() / "c.json");
  EXPECT_EQ(c.model.width, 6u);
  EXPECT_EQ(c.out_dir, "x");
  EXPECT_EQ(error_of([&] { (void)load_config(dir.path() / "bad.json"); }), Errc::InvalidConfig);
  EXPECT_EQ(error_of([&] { (void)load_config(dir.path() / "absent.json"); }), Errc::InvalidConfig);
}

TEST(Config, MefemSpecSwapsLaterStages) {
  const ExperimentConfig c;
  const DetectorSpec base = baseline_spec(c, 1), mef = mefem_spec(c, 1);
  EXPECT_FALSE(base.multiscale);
  EXPECT_TRUE(mef.multiscale);
  EXPECT_EQ(mef.stages.front(), base.stages.front());
  for (std::size_t i = 1; i < mef.stages.size(); ++i) EXPECT_EQ(mef.stages[i], SlotType::Deformable);
  EXPECT_EQ(base.seed, mef.seed);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  TempDir dir("ckpt");
  const ExperimentConfig c = tiny_config(dir.path());
  ToyDetector det(mefem_spec(c, 4));
  std::mt19937_64 rng(123);
  rng.discard(17);
  save_checkpoint(make_checkpoint(det, c, rng), dir.path() / "a.ckpt");
  const Checkpoint loaded = load_checkpoint(dir.path() / "a.ckpt");
  save_checkpoint(loaded, dir.path() / "b.ckpt");
  EXPECT_EQ(slurp(dir.path() / "a.ckpt"), slurp(dir.path() / "b.ckpt"));
  EXPECT_EQ(config_from_json(loaded.config), c);

  std::mt19937_64 back = restore_rng(loaded);
  EXPECT_EQ(back(), rng());
}

TEST(Checkpoint, RestoreIsBitExact) {
  TempDir dir("ckpt");
  const ExperimentConfig c = tiny_config(dir.path());
  ToyDetector trained(baseline_spec(c, 1));
  for (Tensor* p : trained.network().parameters())
    for (auto& v : p->data()) v = v * 1.7 + 1e-3;
  save_checkpoint(make_checkpoint(trained, c, std::mt19937_64(1)), dir.path() / "t.ckpt");
  ToyDetector fresh(baseline_spec(c, 2));
  restore(load_checkpoint(dir.path() / "t.ckpt"), fresh);
  const auto a = trained.network().parameters();
  const auto b = fresh.network().parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bit_equal(*a[i], *b[i]));
}

TEST(Checkpoint, Failures) {
  TempDir dir("ckpt");
  const ExperimentConfig c = tiny_config(dir.path());
  EXPECT_EQ(error_of([&] { (void)load_checkpoint(dir.path() / "none.ckpt"); }), Errc::MissingCheckpoint);

  ToyDetector mef(mefem_spec(c, 1));
  save_checkpoint(make_checkpoint(mef, c, std::mt19937_64(1)), dir.path() / "m.ckpt");
  ToyDetector base(baseline_spec(c, 1));
  const Checkpoint ck = load_checkpoint(dir.path() / "m.ckpt");
  EXPECT_EQ(error_of([&] { restore(ck, base); }), Errc::CheckpointMismatch);

  std::ofstream(dir.path() / "junk.ckpt") << "definitely not a checkpoint";
  EXPECT_EQ(error_of([&] { (void)load_checkpoint(dir.path() / "junk.ckpt"); }), Errc::CheckpointMismatch);

  const std::string bytes = slurp(dir.path() / "m.ckpt");
  std::ofstream(dir.path() / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 8);
  EXPECT_EQ(error_of([&] { (void)load_checkpoint(dir.path() / "short.ckpt"); }), Errc::CheckpointMismatch);
}

TEST(Registry, DefaultCoversEveryLayerType) {
  const LayerRegistry reg = default_layer_registry();
  for (const auto& name : ExperimentConfig{}.gradcheck.layers) EXPECT_TRUE(reg.contains(name)) << name;
  EXPECT_EQ(error_of([&] { (void)reg.get("nope"); }), Errc::InvalidConfig);
  EXPECT_EQ(reg.get("deform_conv").tol, 1e-3);
  EXPECT_EQ(reg.get("conv2d").tol, 1e-4);
}

TEST(GradCheckCommand, DefaultLayersPass) {
  TempDir dir("gc");
  ExperimentConfig c = tiny_config(dir.path());
  c.gradcheck.seeds = {1, 2, 3};
  std::ostringstream log;
  const CommandResult r = cmd_gradcheck(c, default_layer_registry(), log);
  EXPECT_EQ(r.exit_code, 0) << log.str();
  EXPECT_TRUE(fs::exists(dir.path() / "gradcheck.json"));
  EXPECT_EQ(r.report["layers"].size(), c.gradcheck.layers.size());
}

TEST(GradCheckCommand, SignFlipFailsNamingDacconv) {
  TempDir dir("gc");
  ExperimentConfig c = tiny_config(dir.path());
  LayerRegistry reg = default_layer_registry();
  reg.add({"dacconv", 1e-4, [](std::uint64_t seed) {
             std::mt19937_64 rng(seed);
             std::pair<std::unique_ptr<Layer>, Tensor> made{
                 std::make_unique<SignFlippedDac>(DacLayer(init_dac_pair(2, 3, 3, 3, 0, rng, 0.2), {1, 1})),
                 normal_tensor({2, 6, 6}, 1.0, rng)};
             return made;
           }});
  std::ostringstream log;
  const CommandResult r = cmd_gradcheck(c, reg, log);
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(log.str().find("gradient check failed for layer dacconv"), std::string::npos) << log.str();
  for (const auto& layer : r.report["layers"])
    EXPECT_EQ(layer["passed"].get<bool>(), layer["name"] != "dacconv") << layer["name"];
}

TEST(GradCheckCommand, EmptyLayerList) {
  TempDir dir("gc");
  ExperimentConfig c = tiny_config(dir.path());
  c.gradcheck.layers.clear();
  std::ostringstream log;
  const CommandResult r = cmd_gradcheck(c, default_layer_registry(), log);
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_EQ(r.report["note"], "0 layers");
  EXPECT_NE(log.str().find("0 layers"), std::string::npos);
}

TEST(BenchCommand, ReportFields) {
  TempDir dir("bench");
  const ExperimentConfig c = tiny_config(dir.path());
  std::ostringstream log;
  const CommandResult r = cmd_bench_rp(c, log);
  EXPECT_EQ(r.exit_code, 0) << log.str();
  ASSERT_EQ(r.report["workloads"].size(), 2u);
  for (const auto& w : r.report["workloads"]) {
    for (const char* key : {"rp_ops", "legacy_ops", "ratio", "peak_alloc_rp", "peak_alloc_legacy"})
      EXPECT_TRUE(w.contains(key)) << key;
    EXPECT_DOUBLE_EQ(w["ratio"].get<double>(),
                     w["rp_ops"].get<double>() / w["legacy_ops"].get<double>());
  }
  EXPECT_EQ(r.report["config_hash"], config_hash(c));
  EXPECT_EQ(r.report["library_version"], library_version());
}

TEST(BenchCommand, DegenerateSizesStayWithinFactorTwo) {
  TempDir dir("bench");
  ExperimentConfig c = tiny_config(dir.path());
  c.bench.n = {1};
  c.bench.rotations = {1};
  std::ostringstream log;
  const CommandResult r = cmd_bench_rp(c, log);
  const double ratio = r.report["workloads"][0]["ratio"].get<double>();
  EXPECT_GE(ratio, 0.5);
  EXPECT_LE(ratio, 2.0);
  EXPECT_EQ(r.exit_code, 0);
}

TEST(TrainCompareCommand, SingleEpochReportsNotConverged) {
  TempDir dir("tc");
  ExperimentConfig c = tiny_config(dir.path());
  c.train.epochs = 1;
  std::ostringstream log;
  const CommandResult r = cmd_train_compare(c, log);
  EXPECT_EQ(r.exit_code, 1);
  for (const auto& run : r.report["runs"])
    for (const char* model : {"standard", "dacconv"}) {
      EXPECT_TRUE(run[model]["epochs_to_converge"].is_null());
      EXPECT_EQ(run[model]["status"], "not converged");
    }
  EXPECT_TRUE(r.report["median_ratio"].is_null());
  EXPECT_TRUE(fs::exists(dir.path() / "loss_curves.csv"));
}

TEST(TrainCompareCommand, DeterministicAcrossRuns) {
  TempDir a("tc"), b("tc");
  ExperimentConfig ca = tiny_config(a.path()), cb = tiny_config(b.path());
  ca.seeds = cb.seeds = {5};
  std::ostringstream log;
  const CommandResult ra = cmd_train_compare(ca, log), rb = cmd_train_compare(cb, log);
  EXPECT_EQ(ra.report["runs"], rb.report["runs"]);
}

TEST(EvalOcclusionCommand, TrainsThenReloadsCheckpoints) {
  TempDir dir("eo");
  ExperimentConfig c = tiny_config(dir.path());
  c.seeds = {1};
  std::ostringstream log;
  const CommandResult trained = cmd_eval_occlusion(c, log);
  const auto& runs = trained.report["variants"]["with_mefem"]["runs"];
  ASSERT_EQ(runs.size(), 1u);
  EXPECT_TRUE(fs::exists(runs[0]["checkpoint"].get<std::string>()));

  ExperimentConfig reload = c;
  reload.eval.checkpoint_dir = (dir.path() / "checkpoints").string();
  const CommandResult again = cmd_eval_occlusion(reload, log);
  for (const char* v : {"with_mefem", "without_mefem"})
    EXPECT_EQ(again.report["variants"][v]["median"], trained.report["variants"][v]["median"]) << v;
}

TEST(EvalOcclusionCommand, MissingCheckpoints) {
  TempDir dir("eo");
  ExperimentConfig c = tiny_config(dir.path());
  c.eval.checkpoint_dir = (dir.path() / "nowhere").string();
  std::ostringstream log;
  EXPECT_EQ(error_of([&] { (void)cmd_eval_occlusion(c, log); }), Errc::MissingCheckpoint);
  c.eval.checkpoint_dir.clear();
  c.train.epochs = 0;
  EXPECT_EQ(error_of([&] { (void)cmd_eval_occlusion(c, log); }), Errc::MissingCheckpoint);
}

TEST(EvalOcclusionCommand, ZeroObjectScenesExcluded) {
  TempDir dir("eo");
  ExperimentConfig c = tiny_config(dir.path());
  c.seeds = {1};
  c.data.num_objects = 0;
  c.train.epochs = 1;
  std::ostringstream log;
  const CommandResult r = cmd_eval_occlusion(c, log);
  const auto& run = r.report["variants"]["without_mefem"]["runs"][0];
  EXPECT_EQ(run["scenes_evaluated"], 0);
  EXPECT_EQ(run["scenes_excluded"], c.data.eval_scenes);
  EXPECT_EQ(run["ap"]["hard"], 0.0);
}

TEST(ExportPlots, WritesCsvFromReports) {
  TempDir dir("plots");
  ExperimentConfig c = tiny_config(dir.path());
  c.seeds = {2};
  std::ostringstream log;
  EXPECT_EQ(cmd_export_plots(c, log).exit_code, 1);
  (void)cmd_train_compare(c, log);
  (void)cmd_eval_occlusion(c, log);
  fs::remove(dir.path() / "loss_curves.csv");
  const CommandResult r = cmd_export_plots(c, log);
  EXPECT_EQ(r.exit_code, 0);
  const std::string loss = slurp(dir.path() / "loss_curves.csv");
  EXPECT_EQ(loss.rfind("seed,model,epoch,loss\n", 0), 0u);
  EXPECT_NE(loss.find("2,dacconv,2,"), std::string::npos);
  const std::string ap = slurp(dir.path() / "ap_bars.csv");
  EXPECT_NE(ap.find("with_mefem,hard,median,"), std::string::npos);
}

TEST(Median, OddAndEven) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
  EXPECT_EQ(error_of([] { (void)median({}); }), Errc::InvalidHyperparam);
}
