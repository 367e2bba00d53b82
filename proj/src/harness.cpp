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

#include "rpdk/harness.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include "rpdk/pooling.hpp"

namespace rpdk {

using json = nlohmann::json;

namespace {

// Acceptance thresholds applied by the commands.
constexpr double kMaxOpRatio = 0.6;
constexpr double kMaxAllocRatio = 0.77;
constexpr std::size_t kLargeRegion = 32;
constexpr double kMaxConvergeRatio = 0.80;
constexpr double kMaxFinalLossRatio = 1.05;
constexpr double kBilinearTol = 1e-3;
constexpr double kSmoothTol = 1e-4;

}  // namespace

const char* library_version() noexcept { return RPDK_VERSION; }

// --- configuration --------------------------------------------------------------

namespace {

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    require(j_.is_object(), Errc::InvalidConfig, where() + " must be an object");
  }

  // json built in code stores small literals as signed integers
  static bool non_negative_integer(const json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  }

  void get(const char* key, std::size_t& out) {
    if (const json* v = find(key)) {
      require(non_negative_integer(*v), Errc::InvalidConfig, where(key) + " must be a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void get(const char* key, int& out) {
    if (const json* v = find(key)) {
      require(v->is_number_integer(), Errc::InvalidConfig, where(key) + " must be an integer");
      out = v->get<int>();
    }
  }
  void get(const char* key, double& out) {
    if (const json* v = find(key)) {
      require(v->is_number(), Errc::InvalidConfig, where(key) + " must be a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      require(v->is_string(), Errc::InvalidConfig, where(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  template <class T>
  void get(const char* key, std::vector<T>& out) {
    if (const json* v = find(key)) {
      require(v->is_array(), Errc::InvalidConfig, where(key) + " must be an array");
      std::vector<T> values;
      for (const auto& item : *v) {
        if constexpr (std::is_same_v<T, std::string>)
          require(item.is_string(), Errc::InvalidConfig, where(key) + " must hold strings");
        else
          require(non_negative_integer(item), Errc::InvalidConfig, where(key) + " must hold non-negative integers");
        values.push_back(item.get<T>());
      }
      out = std::move(values);
    }
  }
  template <class F>
  void section(const char* key, F&& read) {
    if (const json* v = find(key)) {
      Reader sub(*v, where(key));
      read(sub);
      sub.finish();
    }
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) fail(Errc::InvalidConfig, "unknown key '" + where(item.key().c_str()) + "'");
  }

 private:
  const json* find(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string where(const char* key = nullptr) const {
    if (!key) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a * 0x9e3779b97f4a7c15ULL ^ (b + 0x632be59bd9b4e019ULL);
  x = (x ^ (x >> 31)) * 0xbf58476d1ce4e5b9ULL;
  return x ^ (x >> 29);
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Reader r(j, "");
  r.section("model", [&](Reader& s) {
    s.get("stages", c.model.stages);
    s.get("width", c.model.width);
    s.get("dac_depth", c.model.dac_depth);
    s.get("anchor", c.model.anchor);
  });
  r.section("pools", [&](Reader& s) {
    s.get("pool3d", c.pools.pool3d);
    s.get("pool2d", c.pools.pool2d);
    s.get("rroi", c.pools.rroi);
    s.get("pyramid", c.pools.pyramid);
  });
  r.section("mefem", [&](Reader& s) {
    s.get("k0", c.mefem.k0);
    s.get("pyramid_depth", c.mefem.pyramid_depth);
    s.get("grid", c.mefem.grid);
    s.get("anchor", c.mefem.anchor);
    s.get("reference", c.mefem.reference);
  });
  r.section("data", [&](Reader& s) {
    s.get("image_size", c.data.image_size);
    s.get("num_objects", c.data.num_objects);
    s.get("occlusion_rate", c.data.occlusion_rate);
    s.get("truncation_rate", c.data.truncation_rate);
    s.get("noise", c.data.noise);
    s.get("train_scenes", c.data.train_scenes);
    s.get("eval_scenes", c.data.eval_scenes);
  });
  r.section("train", [&](Reader& s) {
    s.get("epochs", c.train.epochs);
    s.get("batch_size", c.train.batch_size);
    s.get("max_lr", c.train.max_lr);
    s.get("momentum", c.train.momentum);
    s.get("pct_start", c.train.pct_start);
    s.get("grad_clip", c.train.grad_clip);
    s.get("converge_factor", c.train.converge_factor);
  });
  r.section("bench", [&](Reader& s) {
    s.get("n", c.bench.n);
    s.get("rotations", c.bench.rotations);
    s.get("voxels", c.bench.voxels);
  });
  r.section("gradcheck", [&](Reader& s) {
    s.get("layers", c.gradcheck.layers);
    s.get("eps", c.gradcheck.eps);
    s.get("seeds", c.gradcheck.seeds);
  });
  r.section("eval", [&](Reader& s) { s.get("checkpoint_dir", c.eval.checkpoint_dir); });
  r.get("seeds", c.seeds);
  r.get("out_dir", c.out_dir);
  r.finish();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  return {
      {"model",
       {{"stages", c.model.stages}, {"width", c.model.width}, {"dac_depth", c.model.dac_depth}, {"anchor", c.model.anchor}}},
      {"pools", {{"pool3d", c.pools.pool3d}, {"pool2d", c.pools.pool2d}, {"rroi", c.pools.rroi}, {"pyramid", c.pools.pyramid}}},
      {"mefem",
       {{"k0", c.mefem.k0},
        {"pyramid_depth", c.mefem.pyramid_depth},
        {"grid", c.mefem.grid},
        {"anchor", c.mefem.anchor},
        {"reference", c.mefem.reference}}},
      {"data",
       {{"image_size", c.data.image_size},
        {"num_objects", c.data.num_objects},
        {"occlusion_rate", c.data.occlusion_rate},
        {"truncation_rate", c.data.truncation_rate},
        {"noise", c.data.noise},
        {"train_scenes", c.data.train_scenes},
        {"eval_scenes", c.data.eval_scenes}}},
      {"train",
       {{"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"max_lr", c.train.max_lr},
        {"momentum", c.train.momentum},
        {"pct_start", c.train.pct_start},
        {"grad_clip", c.train.grad_clip},
        {"converge_factor", c.train.converge_factor}}},
      {"bench", {{"n", c.bench.n}, {"rotations", c.bench.rotations}, {"voxels", c.bench.voxels}}},
      {"gradcheck", {{"layers", c.gradcheck.layers}, {"eps", c.gradcheck.eps}, {"seeds", c.gradcheck.seeds}}},
      {"eval", {{"checkpoint_dir", c.eval.checkpoint_dir}}},
      {"seeds", c.seeds},
      {"out_dir", c.out_dir},
  };
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), Errc::InvalidConfig, "cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(Errc::InvalidConfig, path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void validate_config(const ExperimentConfig& c) {
  auto check = [](bool ok, const std::string& msg) { require(ok, Errc::InvalidConfig, msg); };
  check(!c.model.stages.empty(), "model.stages must not be empty");
  for (const auto& s : c.model.stages) parse_slot(s);
  check(c.model.width >= 1, "model.width must be positive");
  check(c.model.anchor > 0.0, "model.anchor must be positive");
  for (const auto* name : {&c.pools.pool3d, &c.pools.pool2d, &c.pools.rroi, &c.pools.pyramid}) lookup_pool(*name);
  check(c.mefem.pyramid_depth >= 1, "mefem.pyramid_depth must be at least 1");
  check(c.mefem.grid >= 1, "mefem.grid must be at least 1");
  check(c.mefem.anchor > 0.0 && c.mefem.reference > 0.0, "mefem.anchor and mefem.reference must be positive");
  check(c.data.image_size >= 8 && c.data.image_size % 2 == 0, "data.image_size must be even and at least 8");
  check(c.data.num_objects <= 5, "data.num_objects must be at most 5");
  check(c.data.occlusion_rate >= 0.0 && c.data.occlusion_rate <= 1.0, "data.occlusion_rate must be in [0, 1]");
  check(c.data.truncation_rate >= 0.0 && c.data.truncation_rate <= 1.0, "data.truncation_rate must be in [0, 1]");
  check(c.data.noise >= 0.0, "data.noise must be non-negative");
  check(c.train.batch_size >= 1, "train.batch_size must be positive");
  check(c.train.max_lr > 0.0, "train.max_lr must be positive");
  check(c.train.momentum >= 0.0 && c.train.momentum < 1.0, "train.momentum must be in [0, 1)");
  check(c.train.pct_start > 0.0 && c.train.pct_start < 1.0, "train.pct_start must be in (0, 1)");
  check(c.train.grad_clip >= 0.0, "train.grad_clip must be non-negative");
  check(c.train.converge_factor >= 1.0, "train.converge_factor must be at least 1");
  for (auto n : c.bench.n) check(n >= 1, "bench.n entries must be positive");
  for (auto r : c.bench.rotations) check(r >= 1, "bench.rotations entries must be positive");
  check(c.bench.voxels >= 1, "bench.voxels must be positive");
  check(c.gradcheck.eps > 0.0 && c.gradcheck.eps <= 1e-2, "gradcheck.eps must be in (0, 1e-2]");
  check(!c.gradcheck.seeds.empty(), "gradcheck.seeds must not be empty");
  check(!c.seeds.empty(), "seeds must not be empty");
  check(!c.out_dir.empty(), "out_dir must not be empty");
}

std::string config_hash(const ExperimentConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(config_to_json(config).dump())));
  return buf;
}

DetectorSpec baseline_spec(const ExperimentConfig& c, std::uint64_t seed) {
  DetectorSpec s;
  s.stages.clear();
  for (const auto& name : c.model.stages) s.stages.push_back(parse_slot(name));
  s.width = c.model.width;
  s.dac_depth = c.model.dac_depth;
  s.pool2d = c.pools.pool2d;
  s.anchor = c.model.anchor;
  s.seed = mix(seed, 0x6d6f64656cULL);
  s.fusion.depth = c.mefem.pyramid_depth;
  s.fusion.anchor = c.mefem.anchor;
  s.fusion.fusion = {c.mefem.grid, c.mefem.k0, c.mefem.reference};
  s.fusion.pyramid_pool = c.pools.pyramid;
  s.fusion.rroi_pool = c.pools.rroi;
  return s;
}

DetectorSpec mefem_spec(const ExperimentConfig& c, std::uint64_t seed) {
  DetectorSpec s = baseline_spec(c, seed);
  for (std::size_t i = 1; i < s.stages.size(); ++i) s.stages[i] = SlotType::Deformable;
  s.multiscale = true;
  return s;
}

SceneSpec scene_spec(const ExperimentConfig& c, std::uint64_t seed) {
  SceneSpec s;
  s.image_size = c.data.image_size;
  s.num_objects = c.data.num_objects;
  s.occlusion_rate = c.data.occlusion_rate;
  s.truncation_rate = c.data.truncation_rate;
  s.noise = c.data.noise;
  s.seed = seed;
  return s;
}

TrainConfig train_config(const ExperimentConfig& c, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = c.train.epochs;
  t.batch_size = c.train.batch_size;
  t.max_lr = c.train.max_lr;
  t.momentum = c.train.momentum;
  t.pct_start = c.train.pct_start;
  t.grad_clip = c.train.grad_clip;
  t.seed = mix(seed, 0x7368756666ULL);
  return t;
}

double median(std::vector<double> values) {
  require(!values.empty(), Errc::InvalidHyperparam, "median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t m = values.size() / 2;
  return values.size() % 2 ? values[m] : 0.5 * (values[m - 1] + values[m]);
}

// --- checkpoints -----------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'R', 'P', 'D', 'K', 'C', 'K', 'P', 'T'};

template <class T>
void put_le(std::ostream& out, T value) {
  static_assert(std::endian::native == std::endian::little, "checkpoints are little-endian");
  out.write(reinterpret_cast<const char*>(&value), sizeof value);
}

template <class T>
T get_le(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof value);
  require(in.gcount() == sizeof value, Errc::CheckpointMismatch, "truncated checkpoint");
  return value;
}

}  // namespace

Checkpoint make_checkpoint(const ToyDetector& detector, const ExperimentConfig& config, const std::mt19937_64& rng) {
  Checkpoint ck;
  ck.config = config_to_json(config);
  std::ostringstream state;
  state << rng;
  ck.rng_state = state.str();
  const auto names = detector.parameter_names();
  const auto params = detector.network().parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    ck.params.push_back({names[i], params[i]->shape(), params[i]->values()});
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  json header{{"config", ck.config}, {"rng", ck.rng_state}, {"params", json::array()}};
  for (const auto& p : ck.params) header["params"].push_back({{"name", p.name}, {"shape", p.shape}});
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  require(out.good(), Errc::IoError, "cannot write " + path.string());
  out.write(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, ck.version);
  put_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : ck.params)
    out.write(reinterpret_cast<const char*>(p.values.data()), static_cast<std::streamsize>(p.values.size() * 8));
  require(out.good(), Errc::IoError, "short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), Errc::MissingCheckpoint, "checkpoint not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Errc::IoError, "cannot read " + path.string());
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  require(in.gcount() == sizeof magic && std::memcmp(magic, kMagic, sizeof kMagic) == 0, Errc::CheckpointMismatch,
          path.string() + " is not a checkpoint");
  Checkpoint ck;
  ck.version = get_le<std::uint32_t>(in);
  require(ck.version == 1, Errc::CheckpointMismatch, "unsupported checkpoint version " + std::to_string(ck.version));
  const auto length = get_le<std::uint64_t>(in);
  require(length < (1ULL << 30), Errc::CheckpointMismatch, "implausible checkpoint header length");
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  require(static_cast<std::uint64_t>(in.gcount()) == length, Errc::CheckpointMismatch, "truncated checkpoint header");
  try {
    const json header = json::parse(text);
    ck.config = header.at("config");
    ck.rng_state = header.at("rng").get<std::string>();
    for (const auto& p : header.at("params")) {
      ParamRecord rec{p.at("name").get<std::string>(), p.at("shape").get<Shape>(), {}};
      rec.values.resize(shape_volume(rec.shape));
      ck.params.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    fail(Errc::CheckpointMismatch, std::string("malformed checkpoint header: ") + e.what());
  }
  for (auto& p : ck.params) {
    in.read(reinterpret_cast<char*>(p.values.data()), static_cast<std::streamsize>(p.values.size() * 8));
    require(static_cast<std::size_t>(in.gcount()) == p.values.size() * 8, Errc::CheckpointMismatch,
            "truncated values for " + p.name);
  }
  require(in.peek() == EOF, Errc::CheckpointMismatch, "trailing bytes after checkpoint values");
  return ck;
}

void restore(const Checkpoint& ck, ToyDetector& detector) {
  const auto names = detector.parameter_names();
  auto params = detector.network().parameters();
  require(ck.params.size() == params.size(), Errc::CheckpointMismatch,
          "checkpoint holds " + std::to_string(ck.params.size()) + " tensors, detector has " +
              std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& rec = ck.params[i];
    require(rec.name == names[i] && rec.shape == params[i]->shape(), Errc::CheckpointMismatch,
            "parameter " + std::to_string(i) + ": checkpoint has " + rec.name + " " + shape_to_string(rec.shape) +
                ", detector expects " + names[i] + " " + shape_to_string(params[i]->shape()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) *params[i] = Tensor(ck.params[i].shape, ck.params[i].values);
}

std::mt19937_64 restore_rng(const Checkpoint& ck) {
  std::mt19937_64 rng;
  std::istringstream in(ck.rng_state);
  in >> rng;
  require(!in.fail(), Errc::CheckpointMismatch, "malformed RNG state");
  return rng;
}

// --- layer registry ---------------------------------------------------------------

void LayerRegistry::add(GradCheckCase c) {
  for (auto& existing : cases_)
    if (existing.name == c.name) {
      existing = std::move(c);
      return;
    }
  cases_.push_back(std::move(c));
}

const GradCheckCase& LayerRegistry::get(const std::string& name) const {
  for (const auto& c : cases_)
    if (c.name == name) return c;
  fail(Errc::InvalidConfig, "no gradient check registered for layer '" + name + "'");
}

bool LayerRegistry::contains(const std::string& name) const {
  return std::any_of(cases_.begin(), cases_.end(), [&](const GradCheckCase& c) { return c.name == name; });
}

std::vector<std::string> LayerRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& c : cases_) out.push_back(c.name);
  return out;
}

namespace {

using Made = std::pair<std::unique_ptr<Layer>, Tensor>;

DeformableLayer random_deformable(std::size_t c_in, std::size_t c_out, int padding, std::mt19937_64& rng) {
  return DeformableLayer(he_uniform({c_out, c_in, 3, 3}, c_in * 9, rng), normal_tensor({18, c_in, 3, 3}, 0.2, rng),
                         normal_tensor({18}, 0.4, rng), ConvParams{1, padding});
}

GradCheckCase pool_case(const std::string& fn, double lo) {
  return {"pool_" + fn, kSmoothTol, [fn, lo](std::uint64_t seed) -> Made {
            std::mt19937_64 rng(seed);
            return {std::make_unique<PoolLayer>(lookup_pool(fn), PoolRegionSpec::spatial(2, 2, 2, 2)),
                    uniform_tensor({2, 6, 6}, lo, 1.0, rng)};
          }};
}

}  // namespace

LayerRegistry default_layer_registry() {
  LayerRegistry r;
  r.add({"linear", kSmoothTol, [](std::uint64_t seed) -> Made {
           std::mt19937_64 rng(seed);
           return {std::make_unique<LinearLayer>(normal_tensor({4, 5}, 0.5, rng)), normal_tensor({5}, 1.0, rng)};
         }});
  r.add({"relu", kSmoothTol, [](std::uint64_t seed) -> Made {
           std::mt19937_64 rng(seed);
           return {std::make_unique<ReluLayer>(), uniform_tensor({2, 4, 4}, -1.0, 1.0, rng)};
         }});
  r.add({"conv2d", kSmoothTol, [](std::uint64_t seed) -> Made {
           std::mt19937_64 rng(seed);
           auto layer = std::make_unique<Conv2dLayer>(he_uniform({3, 2, 3, 3}, 18, rng), ConvParams{1, 1},
                                                      normal_tensor({3}, 0.1, rng));
           return {std::move(layer), normal_tensor({2, 6, 6}, 1.0, rng)};
         }});
  r.add({"dacconv", kSmoothTol, [](std::uint64_t seed) -> Made {
           std::mt19937_64 rng(seed);
           auto layer = std::make_unique<DacLayer>(init_dac_pair(2, 3, 3, 3, 12, rng, 0.2), ConvParams{1, 1});
           return {std::move(layer), normal_tensor({2, 6, 6}, 1.0, rng)};
         }});
  r.add(pool_case("max", -1.0));
  r.add(pool_case("avg", -1.0));
  r.add(pool_case("lp", 0.2));
  r.add(pool_case("soft", -1.0));
  r.add({"deform_conv", kBilinearTol, [](std::uint64_t seed) -> Made {
           std::mt19937_64 rng(seed);
           auto layer = std::make_unique<DeformableLayer>(random_deformable(2, 3, 1, rng));
           return {std::move(layer), normal_tensor({2, 6, 6}, 1.0, rng)};
         }});
  r.add({"rroi_pool", kBilinearTol, [](std::uint64_t seed) -> Made {
           std::mt19937_64 rng(seed);
           std::uniform_real_distribution<double> jitter(0.1, 0.4);
           const Roi roi{0.5 + jitter(rng), 1.0 + jitter(rng), 3.3 + jitter(rng), 2.9 + jitter(rng), 0};
           return {std::make_unique<RroiPoolLayer>(roi, 2, lookup_pool("max")), normal_tensor({2, 6, 6}, 1.0, rng)};
         }});
  r.add({"fusion", kBilinearTol, [](std::uint64_t seed) -> Made {
           std::mt19937_64 rng(seed);
           MultiScaleConfig cfg;
           cfg.depth = 3;
           cfg.anchor = 3.3;
           cfg.fusion.reference = 6.0;
           cfg.fusion.k0 = 1;
           return {std::make_unique<MultiScaleRoiLayer>(cfg), normal_tensor({2, 6, 6}, 1.0, rng)};
         }});
  r.add({"eaconv", kBilinearTol, [](std::uint64_t seed) -> Made {
           std::mt19937_64 rng(seed);
           EAConvBlock block{random_deformable(2, 3, 1, rng), random_deformable(3, 2, 1, rng),
                             Roi{0.6, 1.3, 3.7, 3.2, 0}, 2, lookup_pool("max")};
           return {std::make_unique<EAConvLayer>(std::move(block)), normal_tensor({2, 6, 6}, 1.0, rng)};
         }});
  return r;
}

// --- commands -----------------------------------------------------------------------

namespace {

json report_header(const std::string& command, const ExperimentConfig& config) {
  return {{"command", command},
          {"library_version", library_version()},
          {"config_hash", config_hash(config)},
          {"config", config_to_json(config)}};
}

void write_report(const ExperimentConfig& config, const std::string& file, const json& report) {
  const std::filesystem::path dir(config.out_dir);
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / file);
  require(out.good(), Errc::IoError, "cannot write " + (dir / file).string());
  out << report.dump(2) << '\n';
}

json read_report(const ExperimentConfig& config, const std::string& file) {
  const auto path = std::filesystem::path(config.out_dir) / file;
  std::ifstream in(path);
  if (!in.good()) return nullptr;
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(Errc::IoError, path.string() + ": " + e.what());
  }
}

json nullable(const std::optional<std::size_t>& v) { return v ? json(*v) : json(nullptr); }

std::string fmt(double v, int precision = 3) {
  std::ostringstream s;
  s << std::setprecision(precision) << std::scientific << v;
  return s.str();
}

std::string fixed(double v, int precision = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

CommandResult finish(const ExperimentConfig& config, const std::string& file, json report, bool passed,
                     std::ostream& log) {
  report["passed"] = passed;
  write_report(config, file, report);
  log << (passed ? "PASS" : "FAIL") << "  report: " << (std::filesystem::path(config.out_dir) / file).string() << '\n';
  return {passed ? 0 : 1, std::move(report)};
}

void write_loss_csv(const json& train_report, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(out.good(), Errc::IoError, "cannot write " + path.string());
  out << "seed,model,epoch,loss\n" << std::setprecision(17);
  for (const auto& run : train_report.at("runs"))
    for (const char* model : {"standard", "dacconv"}) {
      const auto& curve = run.at(model).at("loss_curve");
      for (std::size_t e = 0; e < curve.size(); ++e)
        out << run.at("seed").get<std::uint64_t>() << ',' << model << ',' << e + 1 << ',' << curve[e].get<double>()
            << '\n';
    }
}

void write_ap_csv(const json& eval_report, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(out.good(), Errc::IoError, "cannot write " + path.string());
  out << "variant,tier,seed,ap\n" << std::setprecision(17);
  for (const char* variant : {"without_mefem", "with_mefem"}) {
    const auto& v = eval_report.at("variants").at(variant);
    for (const char* tier : {"easy", "moderate", "hard"}) {
      for (const auto& run : v.at("runs"))
        out << variant << ',' << tier << ',' << run.at("seed").get<std::uint64_t>() << ','
            << run.at("ap").at(tier).get<double>() << '\n';
      out << variant << ',' << tier << ",median," << v.at("median").at(tier).get<double>() << '\n';
    }
  }
}

}  // namespace

CommandResult cmd_gradcheck(const ExperimentConfig& config, const LayerRegistry& registry, std::ostream& log) {
  json report = report_header("gradcheck", config);
  report["layers"] = json::array();
  bool passed = true;
  if (config.gradcheck.layers.empty()) {
    report["note"] = "0 layers";
    log << "0 layers registered for checking\n";
    return finish(config, "gradcheck.json", std::move(report), true, log);
  }
  log << std::left << std::setw(14) << "layer" << std::setw(6) << "seed" << std::setw(12) << "max_rel_err"
      << std::setw(10) << "tol" << "status\n";
  for (const auto& name : config.gradcheck.layers) {
    const GradCheckCase& c = registry.get(name);
    json entry{{"name", name}, {"tol", c.tol}, {"runs", json::array()}};
    double worst = 0.0;
    bool ok = true;
    for (std::uint64_t seed : config.gradcheck.seeds) {
      auto [layer, input] = c.make(seed);
      const GradCheckReport r = grad_check(*layer, input, {config.gradcheck.eps, c.tol});
      json tensors = json::object();
      for (const auto& e : r.entries) tensors[e.tensor] = e.max_rel_err;
      entry["runs"].push_back({{"seed", seed}, {"max_rel_err", r.max_rel_err}, {"tensors", tensors}, {"passed", r.passed}});
      worst = std::max(worst, r.max_rel_err);
      ok = ok && r.passed;
      log << std::setw(14) << name << std::setw(6) << seed << std::setw(12) << fmt(r.max_rel_err) << std::setw(10)
          << fmt(c.tol, 0) << (r.passed ? "ok" : "FAILED") << '\n';
    }
    entry["max_rel_err"] = worst;
    entry["passed"] = ok;
    if (!ok) log << "gradient check failed for layer " << name << '\n';
    passed = passed && ok;
    report["layers"].push_back(std::move(entry));
  }
  return finish(config, "gradcheck.json", std::move(report), passed, log);
}

CommandResult cmd_bench_rp(const ExperimentConfig& config, std::ostream& log) {
  json report = report_header("bench-rp", config);
  report["pool"] = config.pools.pool3d;
  report["workloads"] = json::array();
  const PoolFn& fn = lookup_pool(config.pools.pool3d);
  std::mt19937_64 rng(config.seeds.front());
  bool passed = true;
  log << std::left << std::setw(6) << "n" << std::setw(7) << "N_rot" << std::setw(10) << "rp_ops" << std::setw(12)
      << "legacy_ops" << std::setw(9) << "ratio" << std::setw(11) << "alloc_rp" << std::setw(13) << "alloc_legacy"
      << std::setw(9) << "ratio" << "status\n";
  for (std::size_t n : config.bench.n)
    for (std::size_t rot : config.bench.rotations) {
      const VoxelFeatureSet voxels{uniform_tensor({config.bench.voxels, rot, n}, -1.0, 1.0, rng),
                                   cyclic_rotations(rot, n)};
      const PoolRun legacy = legacy_pool(voxels);
      const PoolRun rp = replaceable_pool_voxels(voxels, fn);
      const double ratio = static_cast<double>(rp.ops.total()) / static_cast<double>(legacy.ops.total());
      const double alloc = static_cast<double>(rp.peak_bytes) / static_cast<double>(legacy.peak_bytes);
      // Large regions must show the asymptotic saving; tiny ones only stay within a factor of two.
      const bool ok = n >= kLargeRegion ? (ratio <= kMaxOpRatio && alloc <= kMaxAllocRatio)
                                        : (ratio >= 0.5 && ratio <= 2.0);
      passed = passed && ok;
      report["workloads"].push_back({{"n", n},
                                     {"n_rot", rot},
                                     {"voxels", config.bench.voxels},
                                     {"rp_ops", rp.ops.total()},
                                     {"legacy_ops", legacy.ops.total()},
                                     {"ratio", ratio},
                                     {"peak_alloc_rp", rp.peak_bytes},
                                     {"peak_alloc_legacy", legacy.peak_bytes},
                                     {"alloc_ratio", alloc},
                                     {"passed", ok}});
      log << std::setw(6) << n << std::setw(7) << rot << std::setw(10) << rp.ops.total() << std::setw(12)
          << legacy.ops.total() << std::setw(9) << fixed(ratio, 3) << std::setw(11) << rp.peak_bytes << std::setw(13)
          << legacy.peak_bytes << std::setw(9) << fixed(alloc, 3) << (ok ? "ok" : "FAILED") << '\n';
    }
  report["thresholds"] = {{"ratio", kMaxOpRatio}, {"alloc_ratio", kMaxAllocRatio}, {"large_region", kLargeRegion}};
  return finish(config, "bench_rp.json", std::move(report), passed, log);
}

CommandResult cmd_train_compare(const ExperimentConfig& config, std::ostream& log) {
  validate_config(config);
  json report = report_header("train-compare", config);
  report["runs"] = json::array();
  std::vector<double> ratios;
  bool loss_ok = true;
  const bool enough_seeds = config.seeds.size() >= 3;
  for (std::uint64_t seed : config.seeds) {
    const auto train_set = generate_scenes(scene_spec(config, mix(seed, 0x747261696eULL)), config.data.train_scenes);
    auto [standard, dac] = ToyDetector::twins(baseline_spec(config, seed));
    const TrainConfig tc = train_config(config, seed);
    Metrics ms, md;
    try {
      ms = train(standard, tc, train_set, {});
      md = train(dac, tc, train_set, {});
    } catch (const Error& e) {
      fail(e.code(), "seed " + std::to_string(seed) + ": " + e.what());
    }
    json run{{"seed", seed}};
    std::optional<double> ratio;
    if (!ms.loss_curve.empty()) {
      const double best = *std::min_element(ms.loss_curve.begin(), ms.loss_curve.end());
      const double threshold = config.train.converge_factor * best;
      ms.epochs_to_converge = epochs_to_converge(ms.loss_curve, threshold);
      md.epochs_to_converge = epochs_to_converge(md.loss_curve, threshold);
      run["threshold"] = threshold;
      const double final_ratio = md.loss_curve.back() / ms.loss_curve.back();
      run["final_loss_ratio"] = final_ratio;
      loss_ok = loss_ok && final_ratio <= kMaxFinalLossRatio;
      if (ms.epochs_to_converge && md.epochs_to_converge)
        ratio = static_cast<double>(*md.epochs_to_converge) / static_cast<double>(*ms.epochs_to_converge);
    } else {
      loss_ok = false;
    }
    for (auto [name, m] : {std::pair<const char*, const Metrics*>{"standard", &ms}, {"dacconv", &md}})
      run[name] = {{"loss_curve", m->loss_curve},
                   {"final_loss", m->loss_curve.empty() ? json(nullptr) : json(m->loss_curve.back())},
                   {"epochs_to_converge", nullable(m->epochs_to_converge)},
                   {"status", m->epochs_to_converge ? "converged" : "not converged"}};
    run["ratio"] = ratio ? json(*ratio) : json(nullptr);
    if (ratio) ratios.push_back(*ratio);
    log << "seed " << seed << ": standard "
        << (ms.epochs_to_converge ? std::to_string(*ms.epochs_to_converge) : std::string("not converged"))
        << ", dacconv "
        << (md.epochs_to_converge ? std::to_string(*md.epochs_to_converge) : std::string("not converged"))
        << (ms.loss_curve.empty() ? "" : ", final loss " + fixed(ms.loss_curve.back()) + " / " +
                                             fixed(md.loss_curve.back()))
        << '\n';
    report["runs"].push_back(std::move(run));
  }
  // Seeds where either twin never converged have no ratio; the median needs every seed.
  const bool all_converged = ratios.size() == config.seeds.size();
  const double med = ratios.empty() ? 0.0 : median(ratios);
  report["median_ratio"] = all_converged ? json(med) : json(nullptr);
  const bool ratio_ok = all_converged && med <= kMaxConvergeRatio;
  report["assertions"] = {
      {{"name", "at least 3 seeds"}, {"passed", enough_seeds}},
      {{"name", "median epochs-to-converge ratio <= 0.80"}, {"passed", ratio_ok}},
      {{"name", "dacconv final loss <= 1.05 x standard"}, {"passed", loss_ok}},
  };
  if (all_converged) log << "median ratio dacconv/standard: " << fixed(med, 3) << '\n';
  else log << "median ratio unavailable: some runs did not converge\n";

  const std::filesystem::path dir(config.out_dir);
  std::filesystem::create_directories(dir);
  write_loss_csv(report, dir / "loss_curves.csv");
  return finish(config, "train_compare.json", std::move(report), enough_seeds && ratio_ok && loss_ok, log);
}

CommandResult cmd_eval_occlusion(const ExperimentConfig& config, std::ostream& log) {
  validate_config(config);
  if (config.eval.checkpoint_dir.empty() && config.train.epochs == 0)
    fail(Errc::MissingCheckpoint, "no checkpoint directory and no training budget");
  json report = report_header("eval-occlusion", config);
  const std::filesystem::path ckpt_dir = config.eval.checkpoint_dir.empty()
                                             ? std::filesystem::path(config.out_dir) / "checkpoints"
                                             : std::filesystem::path(config.eval.checkpoint_dir);
  struct Variant {
    const char* name;
    DetectorSpec (*spec)(const ExperimentConfig&, std::uint64_t);
    std::vector<double> easy, moderate, hard;
    json runs = json::array();
  };
  std::vector<Variant> variants{{"without_mefem", &baseline_spec, {}, {}, {}}, {"with_mefem", &mefem_spec, {}, {}, {}}};
  json gt = nullptr;
  for (std::uint64_t seed : config.seeds) {
    const auto eval_set = generate_scenes(scene_spec(config, mix(seed, 0x6576616cULL)), config.data.eval_scenes);
    std::vector<Scene> train_set;
    if (config.eval.checkpoint_dir.empty())
      train_set = generate_scenes(scene_spec(config, mix(seed, 0x747261696eULL)), config.data.train_scenes);
    for (auto& v : variants) {
      ToyDetector det(v.spec(config, seed));
      const auto path = ckpt_dir / ("seed" + std::to_string(seed) + "_" + v.name + ".ckpt");
      Metrics m;
      if (config.eval.checkpoint_dir.empty()) {
        const TrainConfig tc = train_config(config, seed);
        std::mt19937_64 rng(tc.seed);
        try {
          m = train(det, tc, train_set, eval_set, rng);
        } catch (const Error& e) {
          fail(e.code(), "seed " + std::to_string(seed) + ", " + v.name + ": " + e.what());
        }
        save_checkpoint(make_checkpoint(det, config, rng), path);
      } else {
        restore(load_checkpoint(path), det);
        m = evaluate(det, eval_set);
      }
      v.easy.push_back(m.ap_easy);
      v.moderate.push_back(m.ap_moderate);
      v.hard.push_back(m.ap_hard);
      v.runs.push_back({{"seed", seed},
                        {"checkpoint", path.string()},
                        {"ap", {{"easy", m.ap_easy}, {"moderate", m.ap_moderate}, {"hard", m.ap_hard}}},
                        {"gt_counts", {{"easy", m.gt.easy}, {"moderate", m.gt.moderate}, {"hard", m.gt.hard}}},
                        {"scenes_evaluated", m.scenes_evaluated},
                        {"scenes_excluded", eval_set.size() - m.scenes_evaluated}});
      log << "seed " << seed << " " << std::left << std::setw(14) << v.name << " AP easy " << fixed(m.ap_easy, 3)
          << "  moderate " << fixed(m.ap_moderate, 3) << "  hard " << fixed(m.ap_hard, 3) << '\n';
    }
  }
  json out = json::object();
  for (auto& v : variants)
    out[v.name] = {{"runs", v.runs},
                   {"median", {{"easy", median(v.easy)}, {"moderate", median(v.moderate)}, {"hard", median(v.hard)}}}};
  report["variants"] = out;
  const double with_hard = out["with_mefem"]["median"]["hard"].get<double>();
  const double without_hard = out["without_mefem"]["median"]["hard"].get<double>();
  const bool ok = with_hard >= without_hard;
  report["assertions"] = {{{"name", "median hard-tier AP with MEFEM >= without"}, {"passed", ok}}};
  log << "median hard-tier AP: with " << fixed(with_hard, 3) << ", without " << fixed(without_hard, 3) << '\n';
  return finish(config, "eval_occlusion.json", std::move(report), ok, log);
}

CommandResult cmd_export_plots(const ExperimentConfig& config, std::ostream& log) {
  json report = report_header("export-plots", config);
  report["files"] = json::array();
  const std::filesystem::path dir(config.out_dir);
  const json train_report = read_report(config, "train_compare.json");
  const json eval_report = read_report(config, "eval_occlusion.json");
  if (!train_report.is_null()) {
    write_loss_csv(train_report, dir / "loss_curves.csv");
    report["files"].push_back("loss_curves.csv");
  }
  if (!eval_report.is_null()) {
    write_ap_csv(eval_report, dir / "ap_bars.csv");
    report["files"].push_back("ap_bars.csv");
  }
  const bool ok = !report["files"].empty();
  if (!ok) log << "no train_compare.json or eval_occlusion.json in " << dir.string() << '\n';
  for (const auto& f : report["files"]) log << "wrote " << (dir / f.get<std::string>()).string() << '\n';
  return finish(config, "export_plots.json", std::move(report), ok, log);
}

}  // namespace rpdk
