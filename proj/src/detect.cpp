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

#include "rpdk/detect.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "rpdk/pooling.hpp"

namespace rpdk {

using json = nlohmann::json;

// --- geometry -----------------------------------------------------------------

const char* tier_name(Tier tier) noexcept {
  switch (tier) {
    case Tier::Easy: return "easy";
    case Tier::Moderate: return "moderate";
    case Tier::Hard: return "hard";
  }
  return "?";
}

Tier tier_for(double covered) noexcept {
  if (covered < 0.10) return Tier::Easy;
  if (covered <= 0.35) return Tier::Moderate;
  return Tier::Hard;
}

double intersection_area(const Box& a, const Box& b) noexcept {
  const double w = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double h = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  return (w > 0.0 && h > 0.0) ? w * h : 0.0;
}

double iou(const Box& a, const Box& b) noexcept {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// --- scenes -------------------------------------------------------------------

namespace {

constexpr double kMaxAnnotatedCover = 0.8;  // objects hidden beyond this are not annotated

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

long uniform_int(std::mt19937_64& rng, long lo, long hi) {
  return std::uniform_int_distribution<long>(lo, std::max(lo, hi))(rng);
}

Box make_box(long x, long y, long w, long h) {
  return {static_cast<double>(x), static_cast<double>(y), static_cast<double>(w), static_cast<double>(h)};
}

Box clip(const Box& b, double size) {
  const double x0 = std::max(b.x, 0.0), y0 = std::max(b.y, 0.0);
  const double x1 = std::min(b.x + b.w, size), y1 = std::min(b.y + b.h, size);
  return {x0, y0, std::max(x1 - x0, 0.0), std::max(y1 - y0, 0.0)};
}

// Places a w x h box inside the image so that it hides 15-60% of `target`.
Box place_over(const Box& target, long w, long h, long size, std::mt19937_64& rng) {
  const long tx = static_cast<long>(target.x), ty = static_cast<long>(target.y);
  const long tw = static_cast<long>(target.w), th = static_cast<long>(target.h);
  const Box visible = clip(target, static_cast<double>(size));
  for (int attempt = 0; attempt < 500; ++attempt) {
    const long x = uniform_int(rng, std::max(0L, tx - w + 1), std::min(size - w, tx + tw - 1));
    const long y = uniform_int(rng, std::max(0L, ty - h + 1), std::min(size - h, ty + th - 1));
    const Box b = make_box(x, y, w, h);
    const double frac = intersection_area(b, visible) / target.area();
    if (frac >= 0.15 && frac <= 0.6) return b;
  }
  // Quarter overlap with the target's far corner, pulled back inside the image.
  const long x = std::clamp(tx + tw / 2, 0L, size - w);
  const long y = std::clamp(ty + th / 2, 0L, size - h);
  return make_box(x, y, w, h);
}

Box place_truncated(long w, long h, long size, std::mt19937_64& rng) {
  long x = uniform_int(rng, 0, size - w), y = uniform_int(rng, 0, size - h);
  switch (uniform_int(rng, 0, 3)) {
    case 0: x = -uniform_int(rng, 1, std::max(1L, w / 2)); break;
    case 1: x = size - w + uniform_int(rng, 1, std::max(1L, w / 2)); break;
    case 2: y = -uniform_int(rng, 1, std::max(1L, h / 2)); break;
    default: y = size - h + uniform_int(rng, 1, std::max(1L, h / 2)); break;
  }
  return make_box(x, y, w, h);
}

Box place_free(long w, long h, long size, const std::vector<Box>& placed, std::mt19937_64& rng) {
  Box b;
  for (int attempt = 0; attempt < 200; ++attempt) {
    b = make_box(uniform_int(rng, 0, size - w), uniform_int(rng, 0, size - h), w, h);
    const bool clear =
        std::none_of(placed.begin(), placed.end(), [&](const Box& p) { return intersection_area(p, b) > 0.0; });
    if (clear) break;
  }
  return b;
}

double pick_intensity(const std::vector<double>& used, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(0.3, 1.0);
  double v = dist(rng);
  for (int attempt = 0; attempt < 100; ++attempt) {
    const bool distinct =
        std::none_of(used.begin(), used.end(), [&](double u) { return std::abs(u - v) < 0.12; });
    if (distinct) break;
    v = dist(rng);
  }
  return v;
}

}  // namespace

Scene generate_scene(const SceneSpec& spec) {
  require(spec.image_size >= 8, Errc::InvalidSpec, "image_size must be at least 8");
  require(spec.num_objects <= 5, Errc::InvalidSpec, "num_objects must be in [0, 5]");
  require(spec.occlusion_rate >= 0.0 && spec.occlusion_rate <= 1.0, Errc::InvalidSpec,
          "occlusion_rate must be in [0, 1]");
  require(spec.truncation_rate >= 0.0 && spec.truncation_rate <= 1.0, Errc::InvalidSpec,
          "truncation_rate must be in [0, 1]");
  require(spec.noise >= 0.0 && std::isfinite(spec.noise), Errc::InvalidSpec, "noise must be non-negative");
  const long size = static_cast<long>(spec.image_size);
  const long lo = spec.min_size ? static_cast<long>(spec.min_size) : std::max(2L, size / 8);
  const long hi = spec.max_size ? static_cast<long>(spec.max_size) : std::max(lo, size / 3);
  require(lo >= 1 && lo <= hi && hi <= size, Errc::InvalidSpec, "box size range must satisfy 1 <= min <= max <= image");

  std::mt19937_64 rng(spec.seed);
  std::bernoulli_distribution occlude(spec.occlusion_rate), truncate(spec.truncation_rate);
  std::vector<Box> full;
  std::vector<double> intensity;
  for (std::size_t i = 0; i < spec.num_objects; ++i) {
    const long w = uniform_int(rng, lo, hi), h = uniform_int(rng, lo, hi);
    const bool over = i > 0 && occlude(rng);
    const bool cut = truncate(rng);
    Box b;
    if (over) {
      const auto target = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<long>(i) - 1));
      b = place_over(full[target], w, h, size, rng);
    } else if (cut) {
      b = place_truncated(w, h, size, rng);
    } else {
      b = place_free(w, h, size, full, rng);
    }
    full.push_back(b);
    intensity.push_back(pick_intensity(intensity, rng));
  }

  Scene scene;
  scene.seed = spec.seed;
  scene.image = Tensor({1, spec.image_size, spec.image_size});
  std::vector<int> owner(spec.image_size * spec.image_size, -1);
  for (std::size_t i = 0; i < full.size(); ++i) {
    const Box c = clip(full[i], static_cast<double>(size));
    for (long y = static_cast<long>(c.y); y < static_cast<long>(c.y + c.h); ++y)
      for (long x = static_cast<long>(c.x); x < static_cast<long>(c.x + c.w); ++x) {
        scene.image[y * size + x] = intensity[i];
        owner[y * size + x] = static_cast<int>(i);
      }
  }
  if (spec.noise > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.noise);
    for (auto& v : scene.image.data()) v += noise(rng);
  }
  for (std::size_t i = 0; i < full.size(); ++i) {
    const Box c = clip(full[i], static_cast<double>(size));
    std::size_t visible = 0;
    for (long y = static_cast<long>(c.y); y < static_cast<long>(c.y + c.h); ++y)
      for (long x = static_cast<long>(c.x); x < static_cast<long>(c.x + c.w); ++x)
        visible += owner[y * size + x] == static_cast<int>(i);
    const double covered = 1.0 - static_cast<double>(visible) / full[i].area();
    if (covered > kMaxAnnotatedCover) continue;
    scene.objects.push_back({c, full[i], covered, tier_for(covered), intensity[i]});
  }
  return scene;
}

std::vector<Scene> generate_scenes(const SceneSpec& base, std::size_t count) {
  std::vector<Scene> scenes;
  scenes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SceneSpec spec = base;
    spec.seed = splitmix64(base.seed ^ splitmix64(i));
    scenes.push_back(generate_scene(spec));
  }
  return scenes;
}

namespace {

json box_json(const Box& b) { return json::array({b.x, b.y, b.w, b.h}); }

Box box_from(const json& j) {
  require(j.is_array() && j.size() == 4, Errc::IoError, "box must be [x, y, w, h]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

Tier parse_tier(const std::string& s) {
  for (Tier t : {Tier::Easy, Tier::Moderate, Tier::Hard})
    if (s == tier_name(t)) return t;
  fail(Errc::IoError, "unknown tier '" + s + "'");
}

void write_doubles(const std::filesystem::path& path, std::span<const double> values) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), Errc::IoError, "cannot write " + path.string());
  static_assert(std::endian::native == std::endian::little, "raw tensor files are little-endian");
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  require(out.good(), Errc::IoError, "short write to " + path.string());
}

std::vector<double> read_doubles(const std::filesystem::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Errc::IoError, "cannot read " + path.string());
  std::vector<double> values(count);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(double)));
  require(in.gcount() == static_cast<std::streamsize>(count * sizeof(double)) && in.peek() == EOF, Errc::IoError,
          path.string() + " does not hold exactly " + std::to_string(count) + " values");
  return values;
}

}  // namespace

void export_scenes(const std::vector<Scene>& scenes, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json index{{"format", "rpdk-scenes"}, {"version", 1}, {"scenes", json::array()}};
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene& s = scenes[i];
    char name[32];
    std::snprintf(name, sizeof name, "scene_%05zu.bin", i);
    write_doubles(dir / name, s.image.data());
    json objects = json::array();
    for (const auto& o : s.objects)
      objects.push_back({{"box", box_json(o.box)},
                         {"full", box_json(o.full)},
                         {"covered", o.covered},
                         {"tier", tier_name(o.tier)},
                         {"intensity", o.intensity}});
    index["scenes"].push_back({{"file", name}, {"shape", s.image.shape()}, {"seed", s.seed}, {"objects", objects}});
  }
  std::ofstream out(dir / "index.json");
  require(out.good(), Errc::IoError, "cannot write " + (dir / "index.json").string());
  out << index.dump(2) << '\n';
}

std::vector<Scene> import_scenes(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.json");
  require(in.good(), Errc::IoError, "missing " + (dir / "index.json").string());
  json index;
  try {
    index = json::parse(in);
  } catch (const json::exception& e) {
    fail(Errc::IoError, std::string("malformed scene index: ") + e.what());
  }
  require(index.value("format", "") == "rpdk-scenes" && index.value("version", 0) == 1, Errc::IoError,
          "unsupported scene index format");
  std::vector<Scene> scenes;
  for (const auto& entry : index.at("scenes")) {
    Scene s;
    const Shape shape = entry.at("shape").get<Shape>();
    s.image = Tensor(shape, read_doubles(dir / entry.at("file").get<std::string>(), shape_volume(shape)));
    s.seed = entry.at("seed").get<std::uint64_t>();
    for (const auto& o : entry.at("objects"))
      s.objects.push_back({box_from(o.at("box")), box_from(o.at("full")), o.at("covered").get<double>(),
                           parse_tier(o.at("tier").get<std::string>()), o.at("intensity").get<double>()});
    scenes.push_back(std::move(s));
  }
  return scenes;
}

// --- detector -----------------------------------------------------------------

const char* slot_name(SlotType slot) noexcept {
  switch (slot) {
    case SlotType::Standard: return "standard";
    case SlotType::Dac: return "dacconv";
    case SlotType::Deformable: return "deformable";
  }
  return "?";
}

SlotType parse_slot(std::string_view name) {
  for (SlotType s : {SlotType::Standard, SlotType::Dac, SlotType::Deformable})
    if (name == slot_name(s)) return s;
  fail(Errc::InvalidConfig, "unknown slot type '" + std::string(name) + "'");
}

namespace {

constexpr std::size_t kHeadChannels = 5;
const ConvParams kSame{1, 1};

std::unique_ptr<Layer> make_slot(SlotType type, std::size_t c_in, std::size_t c_out, const DetectorSpec& spec,
                                 std::mt19937_64& rng) {
  switch (type) {
    case SlotType::Standard:
      return std::make_unique<Conv2dLayer>(he_uniform({c_out, c_in, 3, 3}, c_in * 9, rng), kSame);
    case SlotType::Dac:
      return std::make_unique<DacLayer>(init_dac_pair(c_in, c_out, 3, 3, spec.dac_depth, rng, spec.dac_noise), kSame);
    case SlotType::Deformable:
      return std::make_unique<DeformableLayer>(DeformableLayer::standard_init(c_in, c_out, 3, 3, kSame, rng));
  }
  fail(Errc::InvalidConfig, "unknown slot type");
}

double sigmoid(double z) { return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

}  // namespace

ToyDetector::ToyDetector(const DetectorSpec& spec) : spec_(spec) {
  require(!spec_.stages.empty(), Errc::InvalidConfig, "detector needs at least one stage");
  require(spec_.width >= 1 && spec_.in_channels >= 1, Errc::InvalidConfig, "detector width must be positive");
  require(spec_.anchor > 0.0, Errc::InvalidConfig, "anchor must be positive");
  std::mt19937_64 rng(spec_.seed);
  for (std::size_t i = 0; i < spec_.stages.size(); ++i) {
    net_.add(make_slot(spec_.stages[i], i == 0 ? spec_.in_channels : spec_.width, spec_.width, spec_, rng));
    net_.add(std::make_unique<ReluLayer>());
    if (i == 0) net_.add(std::make_unique<PoolLayer>(lookup_pool(spec_.pool2d), PoolRegionSpec::spatial(2, 2, 2, 2)));
  }
  std::size_t features = spec_.width;
  if (spec_.multiscale) {
    auto fusion = std::make_unique<MultiScaleRoiLayer>(spec_.fusion);
    features = fusion->output_channels(features);
    net_.add(std::move(fusion));
  }
  net_.add(std::make_unique<Conv2dLayer>(he_uniform({kHeadChannels, features, 1, 1}, features, rng), ConvParams{},
                                         Tensor({kHeadChannels})));
}

std::pair<ToyDetector, ToyDetector> ToyDetector::twins(DetectorSpec spec) {
  DetectorSpec dac_spec = spec;
  std::fill(dac_spec.stages.begin(), dac_spec.stages.end(), SlotType::Dac);
  ToyDetector dac(dac_spec);
  DetectorSpec std_spec = spec;
  std::fill(std_spec.stages.begin(), std_spec.stages.end(), SlotType::Standard);
  Sequential net;
  for (std::size_t i = 0; i < dac.net_.size(); ++i) {
    const Layer& layer = dac.net_.layer(i);
    if (const auto* d = dynamic_cast<const DacLayer*>(&layer))
      net.add(std::make_unique<Conv2dLayer>(compose(d->pair()), d->params()));
    else
      net.add(layer.clone());
  }
  return {ToyDetector(std_spec, std::move(net)), std::move(dac)};
}

Tensor ToyDetector::forward(const Tensor& image) const { return net_.forward(image); }

std::vector<Detection> ToyDetector::detect(const Tensor& image, double min_score) const {
  const Tensor head = forward(image);
  const std::size_t gh = head.dim(1), gw = head.dim(2), cells = gh * gw;
  const double s = static_cast<double>(stride());
  std::vector<double> score(cells);
  for (std::size_t i = 0; i < cells; ++i) score[i] = sigmoid(head[i]);
  std::vector<Detection> out;
  for (std::size_t y = 0; y < gh; ++y)
    for (std::size_t x = 0; x < gw; ++x) {
      const std::size_t i = y * gw + x;
      if (score[i] < min_score) continue;
      bool peak = true;
      for (long dy = -1; dy <= 1 && peak; ++dy)
        for (long dx = -1; dx <= 1 && peak; ++dx) {
          const long ny = static_cast<long>(y) + dy, nx = static_cast<long>(x) + dx;
          if ((dy == 0 && dx == 0) || ny < 0 || nx < 0 || ny >= static_cast<long>(gh) || nx >= static_cast<long>(gw))
            continue;
          const std::size_t j = static_cast<std::size_t>(ny) * gw + static_cast<std::size_t>(nx);
          // ties go to the earlier cell in scan order
          if (score[j] > score[i] || (score[j] == score[i] && j < i)) peak = false;
        }
      if (!peak) continue;
      const double cx = (static_cast<double>(x) + 0.5 + head[cells + i]) * s;
      const double cy = (static_cast<double>(y) + 0.5 + head[2 * cells + i]) * s;
      const double w = spec_.anchor * std::exp(std::clamp(head[3 * cells + i], -10.0, 10.0));
      const double h = spec_.anchor * std::exp(std::clamp(head[4 * cells + i], -10.0, 10.0));
      out.push_back({{cx - w / 2.0, cy - h / 2.0, w, h}, score[i]});
    }
  return out;
}

std::vector<std::string> ToyDetector::parameter_names() const {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < net_.size(); ++i) {
    const Layer& layer = net_.layer(i);
    const auto count = layer.parameters().size();
    for (std::size_t j = 0; j < count; ++j)
      names.push_back("layer" + std::to_string(i) + "." + std::string(layer.kind()) + "." + std::to_string(j));
  }
  return names;
}

// --- loss -----------------------------------------------------------------------

Targets make_targets(const Scene& scene, std::size_t grid_h, std::size_t grid_w, std::size_t stride, double anchor) {
  Targets t{std::vector<std::uint8_t>(grid_h * grid_w, 0), Tensor({4, grid_h, grid_w})};
  const std::size_t cells = grid_h * grid_w;
  const double s = static_cast<double>(stride);
  for (const auto& o : scene.objects) {
    const double cx = o.box.x + o.box.w / 2.0, cy = o.box.y + o.box.h / 2.0;
    const auto gx = std::min(static_cast<std::size_t>(std::max(cx / s, 0.0)), grid_w - 1);
    const auto gy = std::min(static_cast<std::size_t>(std::max(cy / s, 0.0)), grid_h - 1);
    const std::size_t i = gy * grid_w + gx;
    t.positive[i] = 1;
    t.boxes[i] = cx / s - (static_cast<double>(gx) + 0.5);
    t.boxes[cells + i] = cy / s - (static_cast<double>(gy) + 0.5);
    t.boxes[2 * cells + i] = std::log(o.box.w / anchor);
    t.boxes[3 * cells + i] = std::log(o.box.h / anchor);
  }
  return t;
}

LossResult detection_loss(const Tensor& head, const Targets& targets) {
  require(head.rank() == 3 && head.dim(0) == kHeadChannels, Errc::ShapeMismatch,
          "detector head must be [5, h, w], got " + shape_to_string(head.shape()));
  const std::size_t cells = head.dim(1) * head.dim(2);
  require(targets.positive.size() == cells, Errc::ShapeMismatch, "targets do not match the head grid");
  const auto npos = static_cast<std::size_t>(std::count(targets.positive.begin(), targets.positive.end(), 1));
  const std::size_t nneg = cells - npos;
  LossResult r{0.0, Tensor::zeros_like(head)};
  for (std::size_t i = 0; i < cells; ++i) {
    const double z = head[i];
    if (targets.positive[i]) {
      const double inv = 1.0 / static_cast<double>(npos);
      r.value += softplus(-z) * inv;
      r.grad[i] = (sigmoid(z) - 1.0) * inv;
      for (std::size_t k = 0; k < 4; ++k) {
        const double d = head[(k + 1) * cells + i] - targets.boxes[k * cells + i];
        const double ad = std::abs(d);
        r.value += (ad < 1.0 ? 0.5 * d * d : ad - 0.5) * inv;
        r.grad[(k + 1) * cells + i] = std::clamp(d, -1.0, 1.0) * inv;
      }
    } else {
      const double inv = 1.0 / static_cast<double>(nneg);
      r.value += softplus(z) * inv;
      r.grad[i] = sigmoid(z) * inv;
    }
  }
  return r;
}

// --- training -----------------------------------------------------------------

double one_cycle_lr(const TrainConfig& c, std::size_t step, std::size_t total_steps) {
  const double initial = c.max_lr / c.div_factor;
  const double final_lr = initial / c.final_div_factor;
  auto anneal = [](double from, double to, double t) {
    const double w = 0.5 * (1.0 + std::cos(M_PI * t));
    return w * from + (1.0 - w) * to;
  };
  const double warm = c.pct_start * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s < warm) return anneal(initial, c.max_lr, s / warm);
  const double rest = static_cast<double>(total_steps) - warm;
  return anneal(c.max_lr, final_lr, rest > 0.0 ? std::min((s - warm) / rest, 1.0) : 1.0);
}

double average_precision_11(const std::vector<bool>& hits, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    tp += hits[i];
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  double ap = 0.0;
  for (int k = 0; k <= 10; ++k) {
    const double r = k / 10.0;
    double best = 0.0;
    for (std::size_t i = 0; i < hits.size(); ++i)
      if (recall[i] >= r - 1e-12) best = std::max(best, precision[i]);
    ap += best;
  }
  return ap / 11.0;
}

Metrics evaluate_detections(const std::vector<Scene>& scenes, const std::vector<std::vector<Detection>>& detections) {
  require(scenes.size() == detections.size(), Errc::ShapeMismatch, "one detection list per scene required");
  Metrics m;
  struct Ranked {
    double score;
    std::size_t scene, det;
  };
  std::vector<Ranked> ranked;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    if (scenes[s].objects.empty()) continue;
    ++m.scenes_evaluated;
    for (const auto& o : scenes[s].objects) {
      if (o.tier == Tier::Easy) ++m.gt.easy;
      else if (o.tier == Tier::Moderate) ++m.gt.moderate;
      else ++m.gt.hard;
    }
    for (std::size_t d = 0; d < detections[s].size(); ++d) ranked.push_back({detections[s][d].score, s, d});
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

  auto ap_for = [&](Tier tier, std::size_t num_gt) {
    std::vector<std::vector<bool>> matched(scenes.size());
    for (std::size_t s = 0; s < scenes.size(); ++s) matched[s].assign(scenes[s].objects.size(), false);
    std::vector<bool> hits;
    for (const auto& r : ranked) {
      const auto& objects = scenes[r.scene].objects;
      const Box& box = detections[r.scene][r.det].box;
      double best = 0.0;
      std::size_t idx = 0;
      for (std::size_t g = 0; g < objects.size(); ++g) {
        const double v = iou(box, objects[g].box);
        if (v > best) best = v, idx = g;
      }
      if (best >= 0.5 && !matched[r.scene][idx]) {
        matched[r.scene][idx] = true;
        if (objects[idx].tier == tier) hits.push_back(true);
      } else {
        hits.push_back(false);
      }
    }
    return average_precision_11(hits, num_gt);
  };
  m.ap_easy = ap_for(Tier::Easy, m.gt.easy);
  m.ap_moderate = ap_for(Tier::Moderate, m.gt.moderate);
  m.ap_hard = ap_for(Tier::Hard, m.gt.hard);
  return m;
}

Metrics evaluate(const ToyDetector& detector, const std::vector<Scene>& scenes) {
  std::vector<std::vector<Detection>> dets;
  dets.reserve(scenes.size());
  for (const auto& s : scenes) dets.push_back(s.objects.empty() ? std::vector<Detection>{} : detector.detect(s.image));
  return evaluate_detections(scenes, dets);
}

Metrics train(ToyDetector& detector, const TrainConfig& config, const std::vector<Scene>& train_set,
              const std::vector<Scene>& eval_set) {
  std::mt19937_64 rng(config.seed);
  return train(detector, config, train_set, eval_set, rng);
}

Metrics train(ToyDetector& detector, const TrainConfig& config, const std::vector<Scene>& train_set,
              const std::vector<Scene>& eval_set, std::mt19937_64& rng) {
  require(config.batch_size >= 1, Errc::InvalidConfig, "batch_size must be at least 1");
  require(config.max_lr > 0.0 && config.momentum >= 0.0 && config.momentum < 1.0, Errc::InvalidConfig,
          "invalid optimizer settings");
  std::vector<double> curve;
  if (config.epochs > 0) {
    require(!train_set.empty(), Errc::InvalidConfig, "empty training set");
    Sequential& net = detector.network();
    const Tensor probe = net.forward(train_set.front().image);
    std::vector<Targets> targets;
    targets.reserve(train_set.size());
    for (const auto& s : train_set)
      targets.push_back(make_targets(s, probe.dim(1), probe.dim(2), detector.stride(), detector.spec().anchor));

    const auto params = net.parameters();
    std::vector<Tensor> velocity, grad;
    for (const auto* p : params) {
      velocity.push_back(Tensor::zeros_like(*p));
      grad.push_back(Tensor::zeros_like(*p));
    }
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t steps_per_epoch = (train_set.size() + config.batch_size - 1) / config.batch_size;
    const std::size_t total = steps_per_epoch * config.epochs;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      double epoch_loss = 0.0;
      for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
        const std::size_t begin = b * config.batch_size;
        const std::size_t end = std::min(begin + config.batch_size, order.size());
        for (auto& g : grad) g.fill(0.0);
        double batch_loss = 0.0;
        const auto diverged = [&] {
          fail(Errc::DivergedLoss, "loss diverged at epoch " + std::to_string(epoch + 1) + ", batch " +
                                       std::to_string(b + 1));
        };
        for (std::size_t k = begin; k < end; ++k) {
          const std::size_t i = order[k];
          try {
            const auto acts = net.activations(train_set[i].image);
            const LossResult loss = detection_loss(acts.back(), targets[i]);
            batch_loss += loss.value;
            const LayerGrad g = net.backward(acts, loss.grad);
            for (std::size_t p = 0; p < grad.size(); ++p) {
              const auto src = g.d_params[p].data();
              auto dst = grad[p].data();
              for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
            }
          } catch (const Error& e) {
            // debug validation catches the overflow inside a layer before the loss sees it
            if (e.code() == Errc::NonFinite) diverged();
            throw;
          }
        }
        if (!std::isfinite(batch_loss)) diverged();
        epoch_loss += batch_loss;
        const double lr = one_cycle_lr(config, step, total);
        double scale = 1.0 / static_cast<double>(end - begin);
        if (config.grad_clip > 0.0) {
          double sq = 0.0;
          for (const auto& g : grad)
            for (double v : g.data()) sq += v * v;
          const double norm = std::sqrt(sq) * scale;
          if (norm > config.grad_clip) scale *= config.grad_clip / norm;
        }
        for (std::size_t p = 0; p < params.size(); ++p) {
          auto v = velocity[p].data();
          auto w = params[p]->data();
          const auto g = grad[p].data();
          for (std::size_t j = 0; j < v.size(); ++j) {
            v[j] = config.momentum * v[j] + g[j] * scale;
            w[j] -= lr * v[j];
          }
        }
      }
      curve.push_back(epoch_loss / static_cast<double>(train_set.size()));
    }
  }
  Metrics m = eval_set.empty() ? Metrics{} : evaluate(detector, eval_set);
  m.loss_curve = std::move(curve);
  return m;
}

std::optional<std::size_t> epochs_to_converge(const std::vector<double>& curve, double threshold) {
  std::size_t first = 0;  // 0-based index from which every loss is within threshold
  for (std::size_t i = curve.size(); i-- > 0;)
    if (!(curve[i] <= threshold)) {
      first = i + 1;
      break;
    }
  if (first + 1 >= curve.size()) return std::nullopt;
  return first + 1;
}

}  // namespace rpdk
