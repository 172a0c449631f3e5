// Copyright (c) 2026 The pets-lab Authors. All Rights Reserved.
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

// Synthetic detection scenes, the fog-style domain shift and the weak/strong
// augmentation pair.
//
// A rendered feature map carries two kinds of signal per cell: the class
// prototype vector scaled by a spatial bump (1 inside the box, cosine
// falloff to 0 within one cell outside), and, on the last four channels of
// cells whose center lies inside a box, the box geometry relative to the
// cell anchor (center displacement in cell units and log size). The
// geometry channels are what makes sub-cell localization recoverable by a
// per-cell head; the fog corruption rescales and biases them, which is
// exactly the miscalibration adaptation has to undo.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pets/boxes.hpp"
#include "pets/model.hpp"

namespace pets {

// Channels reserved at the tail of the feature vector for box geometry.
constexpr int kGeometryChannels = 4;

struct Scene {
  int64_t image_id = 0;
  std::vector<LabeledBox> objects;
};

// Parameterized source-to-target shift: values <- (1-fog)*values + haze,
// then Gaussian noise. fog = 0, noise = 0, haze = 0 is the source domain.
struct DomainConfig {
  double fog_level = 0.0;
  double noise_sigma = 0.0;
  double haze_bias = 0.0;
};

inline void validate(const DomainConfig& d) {
  if (!(d.fog_level >= 0.0 && d.fog_level <= 1.0) || d.noise_sigma < 0.0 || d.haze_bias < 0.0)
    throw std::invalid_argument("DomainConfig: fog in [0,1], noise_sigma >= 0, haze_bias >= 0");
}

// Three preset corruption levels of increasing difficulty.
inline DomainConfig fog_preset(const std::string& name) {
  if (name == "none") return DomainConfig{0.0, 0.0, 0.0};
  if (name == "low") return DomainConfig{0.30, 0.030, 0.15};
  if (name == "mid") return DomainConfig{0.45, 0.045, 0.225};
  if (name == "high") return DomainConfig{0.60, 0.060, 0.30};
  throw std::invalid_argument("unknown fog preset: " + name);
}

struct WeakAugConfig {
  double flip_prob = 0.5;
  double jitter_sigma = 0.02;
};

struct StrongAugConfig {
  double erase_prob = 0.5;
  double erase_max_frac = 0.25;
  double noise_sigma = 0.10;
  double channel_scale_min = 0.85;
  double channel_scale_max = 1.20;
};

struct AugConfig {
  WeakAugConfig weak;
  StrongAugConfig strong;
};

inline void validate(const AugConfig& a) {
  auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in01(a.weak.flip_prob) || a.weak.jitter_sigma < 0.0)
    throw std::invalid_argument("AugConfig: weak.flip_prob in [0,1], weak.jitter_sigma >= 0");
  if (!in01(a.strong.erase_prob) || !in01(a.strong.erase_max_frac) ||
      a.strong.noise_sigma < 0.0 || a.strong.channel_scale_min < 0.0 ||
      a.strong.channel_scale_min > a.strong.channel_scale_max)
    throw std::invalid_argument("AugConfig: invalid strong-augmentation settings");
}

using ClassPrototypes = std::vector<std::vector<double>>;

// Fixed per-class channel signatures, drawn once from a dedicated seed and
// shared by every render in a pipeline. Rows are orthonormal within the
// signal channels when the class count allows it; the geometry channels
// stay zero.
inline ClassPrototypes make_class_prototypes(int num_classes, int channels, uint64_t seed) {
  if (channels < kGeometryChannels + 1)
    throw std::invalid_argument("make_class_prototypes: need at least 5 channels");
  const int signal = channels - kGeometryChannels;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  ClassPrototypes protos(num_classes, std::vector<double>(channels, 0.0));
  for (int k = 0; k < num_classes; ++k) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      std::vector<double> v(signal);
      for (double& x : v) x = gauss(rng);
      if (k < signal) {  // Gram-Schmidt against earlier classes
        for (int j = 0; j < k; ++j) {
          double dot = 0.0;
          for (int c = 0; c < signal; ++c) dot += v[c] * protos[j][c];
          for (int c = 0; c < signal; ++c) v[c] -= dot * protos[j][c];
        }
      }
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-6) continue;
      for (int c = 0; c < signal; ++c) protos[k][c] = v[c] / norm;
      break;
    }
  }
  return protos;
}

// Samples a scene with 1..max_objects boxes, uniform classes, sides of at
// least two cells, and pairwise IoU below 0.3 so target assignment stays
// unambiguous. When the rejection budget runs out the scene simply keeps
// fewer objects.
inline Scene generate_scene(std::mt19937_64& rng, int num_classes, int max_objects, int grid,
                            int64_t image_id = 0) {
  if (num_classes < 1) throw std::invalid_argument("generate_scene: num_classes must be >= 1");
  if (max_objects < 1) throw std::invalid_argument("generate_scene: max_objects must be >= 1");
  if (grid < 2) throw std::invalid_argument("generate_scene: grid must be >= 2");
  const double min_side = 2.0 / grid;
  const double max_side = std::max(min_side, std::min(0.55, 5.0 / grid));
  std::uniform_int_distribution<int> count_dist(1, max_objects);
  std::uniform_int_distribution<int> class_dist(0, num_classes - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Scene scene;
  scene.image_id = image_id;
  const int target_count = count_dist(rng);
  for (int n = 0; n < target_count; ++n) {
    const int cls = class_dist(rng);
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      const double w = min_side + (max_side - min_side) * unit(rng);
      const double h = min_side + (max_side - min_side) * unit(rng);
      const double x1 = (1.0 - w) * unit(rng);
      const double y1 = (1.0 - h) * unit(rng);
      BoxRect box(x1, y1, x1 + w, y1 + h);
      bool ok = true;
      for (const auto& other : scene.objects) {
        if (iou(box, other.box) >= 0.3) {
          ok = false;
          break;
        }
      }
      if (ok) {
        scene.objects.push_back(LabeledBox{box, cls});
        placed = true;
      }
    }
    if (!placed) break;  // budget exhausted; keep the smaller scene
  }
  return scene;
}

inline FeatureMap render_features(const Scene& scene, int grid, const ClassPrototypes& protos,
                                  const DomainConfig& domain, std::mt19937_64& rng) {
  validate(domain);
  if (protos.empty()) throw std::invalid_argument("render_features: prototypes are empty");
  const int channels = static_cast<int>(protos.front().size());
  if (channels < kGeometryChannels + 1)
    throw std::invalid_argument("render_features: need at least 5 channels");
  FeatureMap fmap = FeatureMap::zeros(grid, channels);
  const double cell = 1.0 / grid;
  for (const auto& obj : scene.objects) {
    if (obj.class_id < 0 || obj.class_id >= static_cast<int>(protos.size()))
      throw std::invalid_argument("render_features: class id outside prototype table");
    const auto& proto = protos[obj.class_id];
    for (int y = 0; y < grid; ++y) {
      for (int x = 0; x < grid; ++x) {
        const double ccx = (x + 0.5) * cell;
        const double ccy = (y + 0.5) * cell;
        const double dx_out = std::max({0.0, obj.box.x1 - ccx, ccx - obj.box.x2});
        const double dy_out = std::max({0.0, obj.box.y1 - ccy, ccy - obj.box.y2});
        double bump = 0.0;
        const bool inside = dx_out == 0.0 && dy_out == 0.0;
        if (inside) {
          bump = 1.0;
        } else {
          const double d = std::hypot(dx_out, dy_out);
          if (d < cell) bump = 0.5 * (1.0 + std::cos(M_PI * d * grid));
        }
        if (bump <= 0.0) continue;
        double* dst = &fmap.at(x, y, 0);
        for (int c = 0; c < channels; ++c) dst[c] += bump * proto[c];
        if (inside) {
          dst[channels - 4] += (obj.box.cx() - ccx) * grid;
          dst[channels - 3] += (obj.box.cy() - ccy) * grid;
          dst[channels - 2] += std::log(obj.box.width() * grid);
          dst[channels - 1] += std::log(obj.box.height() * grid);
        }
      }
    }
  }
  const double keep = 1.0 - domain.fog_level;
  if (domain.fog_level != 0.0 || domain.haze_bias != 0.0) {
    for (double& v : fmap.values) v = keep * v + domain.haze_bias;
  }
  if (domain.noise_sigma > 0.0) {
    std::normal_distribution<double> gauss(0.0, domain.noise_sigma);
    for (double& v : fmap.values) v += gauss(rng);
  }
  return fmap;
}

// Horizontal flip with flip_prob plus Gaussian jitter. The flipped scene is
// returned alongside so boxes and features stay consistent.
inline std::pair<FeatureMap, Scene> weak_aug(const FeatureMap& fmap, const Scene& scene,
                                             std::mt19937_64& rng, const WeakAugConfig& cfg) {
  if (!(cfg.flip_prob >= 0.0 && cfg.flip_prob <= 1.0) || cfg.jitter_sigma < 0.0)
    throw std::invalid_argument("weak_aug: invalid config");
  FeatureMap out = fmap;
  Scene out_scene = scene;
  bool flipped = false;
  if (cfg.flip_prob > 0.0) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    flipped = unit(rng) < cfg.flip_prob;
  }
  if (flipped) {
    const int G = fmap.grid;
    for (int y = 0; y < G; ++y)
      for (int x = 0; x < G; ++x)
        for (int c = 0; c < fmap.channels; ++c) out.at(x, y, c) = fmap.at(G - 1 - x, y, c);
    // mirrored geometry: the x displacement channel changes sign
    if (fmap.channels >= kGeometryChannels + 1)
      for (int y = 0; y < G; ++y)
        for (int x = 0; x < G; ++x) out.at(x, y, fmap.channels - 4) *= -1.0;
    out_scene.objects.clear();
    for (const auto& obj : scene.objects) {
      out_scene.objects.push_back(
          LabeledBox{BoxRect(1.0 - obj.box.x2, obj.box.y1, 1.0 - obj.box.x1, obj.box.y2),
                     obj.class_id});
    }
  }
  if (cfg.jitter_sigma > 0.0) {
    std::normal_distribution<double> gauss(0.0, cfg.jitter_sigma);
    for (double& v : out.values) v += gauss(rng);
  }
  return {std::move(out), std::move(out_scene)};
}

// Random erasing, Gaussian noise and per-channel scaling on top of the weak
// view. Labels are untouched; all three corruptions are label-preserving.
inline FeatureMap strong_aug(const FeatureMap& fmap, std::mt19937_64& rng,
                             const StrongAugConfig& cfg) {
  if (!(cfg.erase_prob >= 0.0 && cfg.erase_prob <= 1.0) ||
      !(cfg.erase_max_frac >= 0.0 && cfg.erase_max_frac <= 1.0) || cfg.noise_sigma < 0.0 ||
      cfg.channel_scale_min < 0.0 || cfg.channel_scale_min > cfg.channel_scale_max)
    throw std::invalid_argument("strong_aug: invalid config");
  FeatureMap out = fmap;
  const int G = fmap.grid;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (cfg.erase_prob > 0.0 && cfg.erase_max_frac > 0.0 && unit(rng) < cfg.erase_prob) {
    int pw = std::clamp(static_cast<int>(std::lround(G * std::sqrt(cfg.erase_max_frac))), 1, G);
    int ph = std::clamp(static_cast<int>(cfg.erase_max_frac * G * G / pw), 1, G);
    std::uniform_int_distribution<int> xd(0, G - pw), yd(0, G - ph);
    const int x0 = xd(rng);
    const int y0 = yd(rng);
    for (int y = y0; y < y0 + ph; ++y)
      for (int x = x0; x < x0 + pw; ++x)
        for (int c = 0; c < fmap.channels; ++c) out.at(x, y, c) = 0.0;
  }
  if (cfg.noise_sigma > 0.0) {
    std::normal_distribution<double> gauss(0.0, cfg.noise_sigma);
    for (double& v : out.values) v += gauss(rng);
  }
  if (cfg.channel_scale_min < cfg.channel_scale_max) {
    std::uniform_real_distribution<double> scale(cfg.channel_scale_min, cfg.channel_scale_max);
    for (int c = 0; c < fmap.channels; ++c) {
      const double s = scale(rng);
      for (int y = 0; y < G; ++y)
        for (int x = 0; x < G; ++x) out.at(x, y, c) *= s;
    }
  }
  return out;
}

// ---------- dataset manifest (JSON lines, one scene per line) ----------

inline nlohmann::json scene_to_json(const Scene& scene) {
  nlohmann::json objects = nlohmann::json::array();
  for (const auto& obj : scene.objects) {
    objects.push_back({{"class_id", obj.class_id},
                       {"x1", obj.box.x1},
                       {"y1", obj.box.y1},
                       {"x2", obj.box.x2},
                       {"y2", obj.box.y2}});
  }
  return nlohmann::json{{"image_id", scene.image_id}, {"objects", objects}};
}

inline Scene scene_from_json(const nlohmann::json& j) {
  Scene scene;
  scene.image_id = j.at("image_id").get<int64_t>();
  for (const auto& o : j.at("objects")) {
    scene.objects.push_back(
        LabeledBox{BoxRect(o.at("x1").get<double>(), o.at("y1").get<double>(),
                           o.at("x2").get<double>(), o.at("y2").get<double>()),
                   o.at("class_id").get<int>()});
  }
  return scene;
}

inline void save_manifest(const std::string& path, const std::vector<Scene>& scenes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest: " + path);
  for (const auto& s : scenes) out << scene_to_json(s).dump() << "\n";
}

inline std::vector<Scene> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest: " + path);
  std::vector<Scene> scenes;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    scenes.push_back(scene_from_json(nlohmann::json::parse(line)));
  }
  return scenes;
}

}  // namespace pets
