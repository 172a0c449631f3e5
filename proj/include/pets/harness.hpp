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

// Experiment driver: source pretraining, the periodic-exchange adaptation
// loop, ablation sweeps, curve export, checkpointing and the self-check.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pets/boxes.hpp"
#include "pets/eval.hpp"
#include "pets/model.hpp"
#include "pets/oracles.hpp"
#include "pets/rng.hpp"
#include "pets/scheduler.hpp"
#include "pets/synthdata.hpp"

namespace pets {

// ---------- configuration ----------

struct DataConfig {
  int num_source_scenes = 400;
  int num_target_scenes = 480;
  int num_eval_scenes = 150;
  int max_objects = 4;
  std::string fog_preset = "high";
  std::optional<double> fog_level;    // explicit overrides of the preset
  std::optional<double> noise_sigma;
  std::optional<double> haze_bias;
  uint64_t seed = 1;                       // run seed; PETS_SEED overrides
  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};  // ablation sweep
  uint64_t scenes_seed = 90210;      // dataset geometry, shared across runs
  uint64_t prototype_seed = 41;      // class signatures, shared across runs
};

struct OptimizerConfig {
  double base_lr = 8e-4;
  int batch_size = 8;
  int epochs = 30;
  double lr_decay = 0.1;
  int decay_epoch = -1;  // -1: defaults to 80% of epochs
};

struct PetsConfig {
  double ema_alpha = 0.999;
  int ema_stepsize = 1;
  int warmup_epochs = 2;
  std::string strategy = "swap";   // baseline | s_to_st | dt_to_s | dt_to_st | swap
  std::string mode = "consensus";  // consensus | single_dt | single_st
  double delta = 0.5;
  double eta = 0.5;
  double beta = 0.5;
  double nms_iou = 0.5;
  double obj_thresh = 0.25;  // decode threshold for teacher predictions
};

struct EvalSettings {
  double iou = 0.5;
  int eval_every = 1;
  double obj_thresh = 0.05;  // decode threshold used for evaluation
};

struct OutputConfig {
  std::string dir = "runs/out";
};

struct ExperimentConfig {
  DetectorArch arch;
  DataConfig data;
  OptimizerConfig optimizer;
  PetsConfig pets;
  EvalSettings eval;
  AugConfig aug;
  OutputConfig output;
};

inline void validate(const ExperimentConfig& cfg) {
  validate(cfg.arch);
  auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (cfg.data.num_source_scenes < 1 || cfg.data.num_target_scenes < 1 ||
      cfg.data.num_eval_scenes < 1 || cfg.data.max_objects < 1)
    throw std::invalid_argument("config: scene counts and max_objects must be >= 1");
  if (cfg.optimizer.base_lr < 0.0 || cfg.optimizer.batch_size < 1 || cfg.optimizer.epochs < 0 ||
      !in01(cfg.optimizer.lr_decay))
    throw std::invalid_argument("config: invalid optimizer settings");
  if (!in01(cfg.pets.ema_alpha) || cfg.pets.ema_stepsize < 1 || cfg.pets.warmup_epochs < 0 ||
      !in01(cfg.pets.delta) || !in01(cfg.pets.eta) || !in01(cfg.pets.beta) ||
      !in01(cfg.pets.nms_iou) || !in01(cfg.pets.obj_thresh))
    throw std::invalid_argument("config: invalid pets settings");
  if (!in01(cfg.eval.iou) || cfg.eval.eval_every < 1 || !in01(cfg.eval.obj_thresh))
    throw std::invalid_argument("config: invalid eval settings");
  validate(cfg.aug);
  flow_strategy_from_string(cfg.pets.strategy);
  if (cfg.pets.mode != "consensus" && cfg.pets.mode != "single_dt" && cfg.pets.mode != "single_st")
    throw std::invalid_argument("config: pets.mode must be consensus, single_dt or single_st");
}

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void read_optional(const nlohmann::json& j, const char* key, std::optional<double>& out) {
  if (j.contains(key)) out = j.at(key).get<double>();
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  if (j.contains("arch")) {
    const auto& a = j.at("arch");
    detail::read_field(a, "G", cfg.arch.grid);
    detail::read_field(a, "C", cfg.arch.channels);
    detail::read_field(a, "K", cfg.arch.num_classes);
    detail::read_field(a, "H", cfg.arch.hidden);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::read_field(d, "num_source_scenes", cfg.data.num_source_scenes);
    detail::read_field(d, "num_target_scenes", cfg.data.num_target_scenes);
    detail::read_field(d, "num_eval_scenes", cfg.data.num_eval_scenes);
    detail::read_field(d, "max_objects", cfg.data.max_objects);
    detail::read_field(d, "fog_preset", cfg.data.fog_preset);
    detail::read_optional(d, "fog_level", cfg.data.fog_level);
    detail::read_optional(d, "noise_sigma", cfg.data.noise_sigma);
    detail::read_optional(d, "haze_bias", cfg.data.haze_bias);
    detail::read_field(d, "seed", cfg.data.seed);
    detail::read_field(d, "seeds", cfg.data.seeds);
    detail::read_field(d, "scenes_seed", cfg.data.scenes_seed);
    detail::read_field(d, "prototype_seed", cfg.data.prototype_seed);
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    detail::read_field(o, "base_lr", cfg.optimizer.base_lr);
    detail::read_field(o, "batch_size", cfg.optimizer.batch_size);
    detail::read_field(o, "epochs", cfg.optimizer.epochs);
    detail::read_field(o, "lr_decay", cfg.optimizer.lr_decay);
    detail::read_field(o, "decay_epoch", cfg.optimizer.decay_epoch);
  }
  if (j.contains("pets")) {
    const auto& p = j.at("pets");
    detail::read_field(p, "ema_alpha", cfg.pets.ema_alpha);
    detail::read_field(p, "ema_stepsize", cfg.pets.ema_stepsize);
    detail::read_field(p, "warmup_epochs", cfg.pets.warmup_epochs);
    detail::read_field(p, "strategy", cfg.pets.strategy);
    detail::read_field(p, "mode", cfg.pets.mode);
    detail::read_field(p, "delta", cfg.pets.delta);
    detail::read_field(p, "eta", cfg.pets.eta);
    detail::read_field(p, "beta", cfg.pets.beta);
    detail::read_field(p, "nms_iou", cfg.pets.nms_iou);
    detail::read_field(p, "obj_thresh", cfg.pets.obj_thresh);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::read_field(e, "iou", cfg.eval.iou);
    detail::read_field(e, "eval_every", cfg.eval.eval_every);
    detail::read_field(e, "obj_thresh", cfg.eval.obj_thresh);
  }
  if (j.contains("aug")) {
    const auto& a = j.at("aug");
    if (a.contains("weak")) {
      const auto& w = a.at("weak");
      detail::read_field(w, "flip_prob", cfg.aug.weak.flip_prob);
      detail::read_field(w, "jitter_sigma", cfg.aug.weak.jitter_sigma);
    }
    if (a.contains("strong")) {
      const auto& s = a.at("strong");
      detail::read_field(s, "erase_prob", cfg.aug.strong.erase_prob);
      detail::read_field(s, "erase_max_frac", cfg.aug.strong.erase_max_frac);
      detail::read_field(s, "noise_sigma", cfg.aug.strong.noise_sigma);
      detail::read_field(s, "channel_scale_min", cfg.aug.strong.channel_scale_min);
      detail::read_field(s, "channel_scale_max", cfg.aug.strong.channel_scale_max);
    }
  }
  if (j.contains("output")) {
    detail::read_field(j.at("output"), "dir", cfg.output.dir);
  }
  validate(cfg);
  return cfg;
}

inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json data{{"num_source_scenes", cfg.data.num_source_scenes},
                      {"num_target_scenes", cfg.data.num_target_scenes},
                      {"num_eval_scenes", cfg.data.num_eval_scenes},
                      {"max_objects", cfg.data.max_objects},
                      {"fog_preset", cfg.data.fog_preset},
                      {"seed", cfg.data.seed},
                      {"seeds", cfg.data.seeds},
                      {"scenes_seed", cfg.data.scenes_seed},
                      {"prototype_seed", cfg.data.prototype_seed}};
  if (cfg.data.fog_level) data["fog_level"] = *cfg.data.fog_level;
  if (cfg.data.noise_sigma) data["noise_sigma"] = *cfg.data.noise_sigma;
  if (cfg.data.haze_bias) data["haze_bias"] = *cfg.data.haze_bias;
  return nlohmann::json{
      {"arch",
       {{"G", cfg.arch.grid},
        {"C", cfg.arch.channels},
        {"K", cfg.arch.num_classes},
        {"H", cfg.arch.hidden}}},
      {"data", data},
      {"optimizer",
       {{"base_lr", cfg.optimizer.base_lr},
        {"batch_size", cfg.optimizer.batch_size},
        {"epochs", cfg.optimizer.epochs},
        {"lr_decay", cfg.optimizer.lr_decay},
        {"decay_epoch", cfg.optimizer.decay_epoch}}},
      {"pets",
       {{"ema_alpha", cfg.pets.ema_alpha},
        {"ema_stepsize", cfg.pets.ema_stepsize},
        {"warmup_epochs", cfg.pets.warmup_epochs},
        {"strategy", cfg.pets.strategy},
        {"mode", cfg.pets.mode},
        {"delta", cfg.pets.delta},
        {"eta", cfg.pets.eta},
        {"beta", cfg.pets.beta},
        {"nms_iou", cfg.pets.nms_iou},
        {"obj_thresh", cfg.pets.obj_thresh}}},
      {"eval",
       {{"iou", cfg.eval.iou},
        {"eval_every", cfg.eval.eval_every},
        {"obj_thresh", cfg.eval.obj_thresh}}},
      {"aug",
       {{"weak",
         {{"flip_prob", cfg.aug.weak.flip_prob}, {"jitter_sigma", cfg.aug.weak.jitter_sigma}}},
        {"strong",
         {{"erase_prob", cfg.aug.strong.erase_prob},
          {"erase_max_frac", cfg.aug.strong.erase_max_frac},
          {"noise_sigma", cfg.aug.strong.noise_sigma},
          {"channel_scale_min", cfg.aug.strong.channel_scale_min},
          {"channel_scale_max", cfg.aug.strong.channel_scale_max}}}}},
      {"output", {{"dir", cfg.output.dir}}}};
}

// Reads a config file; the PETS_SEED environment variable, when set,
// overrides data.seed.
inline ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config: " + path);
  nlohmann::json j;
  in >> j;
  ExperimentConfig cfg = config_from_json(j);
  if (const char* env = std::getenv("PETS_SEED")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0')
      throw std::runtime_error("PETS_SEED must be an unsigned integer");
    cfg.data.seed = static_cast<uint64_t>(v);
  }
  return cfg;
}

inline DomainConfig source_domain() { return DomainConfig{0.0, 0.0, 0.0}; }

inline DomainConfig target_domain(const ExperimentConfig& cfg) {
  DomainConfig d = fog_preset(cfg.data.fog_preset);
  if (cfg.data.fog_level) d.fog_level = *cfg.data.fog_level;
  if (cfg.data.noise_sigma) d.noise_sigma = *cfg.data.noise_sigma;
  if (cfg.data.haze_bias) d.haze_bias = *cfg.data.haze_bias;
  validate(d);
  return d;
}

inline ClassPrototypes prototypes(const ExperimentConfig& cfg) {
  return make_class_prototypes(cfg.arch.num_classes, cfg.arch.channels, cfg.data.prototype_seed);
}

// Scene sets are derived from scenes_seed, not the run seed: the datasets
// are fixed while run seeds vary the training stochasticity.
inline std::vector<Scene> make_scenes(const ExperimentConfig& cfg, std::string_view tag,
                                      int count) {
  std::vector<Scene> scenes;
  scenes.reserve(count);
  for (int i = 0; i < count; ++i) {
    auto rng = make_rng(cfg.data.scenes_seed, tag, static_cast<uint64_t>(i));
    scenes.push_back(
        generate_scene(rng, cfg.arch.num_classes, cfg.data.max_objects, cfg.arch.grid, i));
  }
  return scenes;
}

// Xavier-uniform weights, zero biases.
inline ParamVector init_params(const DetectorArch& arch, uint64_t seed) {
  validate(arch);
  ParamVector params(arch.param_count(), 0.0);
  std::mt19937_64 rng(seed);
  const int U = arch.trunk_dim();
  std::size_t pos = 0;
  auto fill_layer = [&](int fan_in, int fan_out) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (int i = 0; i < fan_in * fan_out; ++i) params[pos++] = dist(rng);
    pos += fan_out;  // biases stay zero
  };
  if (arch.hidden > 0) fill_layer(arch.channels, arch.hidden);
  fill_layer(U, 5);
  fill_layer(U + 1, arch.head_b_out());
  return params;
}

// Runs a parameter vector over a scene set and reports mAP. Evaluation
// renders are un-augmented; their noise streams depend only on scenes_seed
// and the tag, so an evaluation set looks identical at every epoch.
inline EvalReport evaluate_params(const ExperimentConfig& cfg, const ParamVector& params,
                                  const std::vector<Scene>& scenes, const DomainConfig& domain,
                                  std::string_view noise_tag) {
  const ClassPrototypes protos = prototypes(cfg);
  DetectionsByImage dets_by_image;
  GroundTruthByImage gts_by_image;
  for (const auto& scene : scenes) {
    auto rng = make_rng(cfg.data.scenes_seed, noise_tag, static_cast<uint64_t>(scene.image_id));
    const FeatureMap fmap = render_features(scene, cfg.arch.grid, protos, domain, rng);
    const auto raw = decode(forward(cfg.arch, params, fmap), cfg.eval.obj_thresh);
    dets_by_image[scene.image_id] = nms(raw, cfg.pets.nms_iou);
    gts_by_image[scene.image_id] = scene.objects;
  }
  return evaluate(dets_by_image, gts_by_image, cfg.eval.iou);
}

inline int resolve_decay_epoch(const OptimizerConfig& opt) {
  return opt.decay_epoch >= 0 ? opt.decay_epoch
                              : static_cast<int>(std::floor(0.8 * opt.epochs));
}

// ---------- source pretraining ----------

// Supervised training on clean source scenes with the true labels. Target
// data is never touched here.
inline Checkpoint pretrain_source(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  validate(cfg);
  const ClassPrototypes protos = prototypes(cfg);
  const auto scenes = make_scenes(cfg, "source_scene", cfg.data.num_source_scenes);
  const DomainConfig domain = source_domain();

  // noiseless source renders: cache maps and targets once
  std::vector<FeatureMap> fmaps;
  std::vector<CellTargets> targets;
  fmaps.reserve(scenes.size());
  targets.reserve(scenes.size());
  for (const auto& scene : scenes) {
    auto rng = make_rng(cfg.data.scenes_seed, "source_render", scene.image_id);
    fmaps.push_back(render_features(scene, cfg.arch.grid, protos, domain, rng));
    targets.push_back(assign_targets(scene.objects, cfg.arch.grid));
  }

  ParamVector params = init_params(cfg.arch, derive_seed(cfg.data.seed, "init"));
  const int n = static_cast<int>(scenes.size());
  const int batch = cfg.optimizer.batch_size;
  const int decay_epoch = resolve_decay_epoch(cfg.optimizer);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.optimizer.epochs; ++epoch) {
    auto shuffle_rng = make_rng(cfg.data.seed, "pretrain_shuffle", epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const double lr =
        cfg.optimizer.base_lr * (epoch >= decay_epoch ? cfg.optimizer.lr_decay : 1.0);
    double epoch_loss = 0.0;
    for (int start = 0; start < n; start += batch) {
      const int end = std::min(n, start + batch);
      ParamVector grad(params.size(), 0.0);
      double batch_loss = 0.0;
      for (int b = start; b < end; ++b) {
        const int i = order[b];
        LossBreakdown loss;
        const ParamVector g = loss_gradient(cfg.arch, params, fmaps[i], targets[i], &loss);
        for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += g[k];
        batch_loss += loss.total;
      }
      const double inv = 1.0 / (end - start);
      for (double& g : grad) g *= inv;
      batch_loss *= inv;
      if (!std::isfinite(batch_loss))
        throw std::runtime_error("pretraining diverged: non-finite loss at epoch " +
                                 std::to_string(epoch));
      params = sgd_step(params, grad, lr);
      epoch_loss += batch_loss;
    }
    if (log)
      (*log) << "pretrain epoch " << epoch << " mean loss "
             << epoch_loss / std::max(1, (n + batch - 1) / batch) << "\n";
  }
  return Checkpoint{1, cfg.arch, std::move(params), cfg.data.seed, cfg.optimizer.epochs};
}

// ---------- adaptation ----------

// One (epoch, role) record of the training curves.
struct CurvePoint {
  int epoch = 0;
  std::string role;  // student | static_teacher | dynamic_teacher
  double map50 = 0.0;
  double mean_total_loss = 0.0;
  int64_t num_pseudo_labels = 0;
};

struct AdaptOptions {
  bool record_static_checksums = false;
};

struct AdaptResult {
  std::vector<CurvePoint> curves;
  Checkpoint final_checkpoint;  // params of the reserved inference model
  TrainerState final_state;
  std::vector<std::string> warnings;
  std::vector<uint64_t> static_checksums;  // one per iteration when recorded
  std::vector<std::pair<int64_t, PseudoLabel>> last_epoch_pseudo_labels;
};

inline uint64_t param_checksum(const ParamVector& params) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : params) {
    uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, sizeof(bits));
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xffu;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

// Source-free adaptation on unlabeled target scenes. Teachers predict on the
// weak view, the consensus produces pseudo labels, and the student trains on
// the strong view against them. Ground-truth target labels never feed a
// gradient; they are only consulted by the held-out evaluation.
inline AdaptResult adapt(const ExperimentConfig& cfg, const Checkpoint& source,
                         std::ostream* log = nullptr, const AdaptOptions& opts = {}) {
  validate(cfg);
  if (!(cfg.arch == source.arch))
    throw std::invalid_argument("adapt: config and checkpoint architectures differ");
  if (cfg.optimizer.epochs < cfg.pets.warmup_epochs)
    throw std::invalid_argument("adapt: epochs must be >= warmup_epochs");
  check_params(cfg.arch, source.params);

  const ClassPrototypes protos = prototypes(cfg);
  const auto train_scenes = make_scenes(cfg, "target_scene", cfg.data.num_target_scenes);
  const auto eval_scenes = make_scenes(cfg, "eval_target_scene", cfg.data.num_eval_scenes);
  const DomainConfig domain = target_domain(cfg);
  const FlowStrategy strategy = flow_strategy_from_string(cfg.pets.strategy);
  const bool single_dt = cfg.pets.mode == "single_dt";
  const bool single_st = cfg.pets.mode == "single_st";
  const bool use_consensus = cfg.pets.mode == "consensus";
  const ConsensusConfig ccfg{cfg.pets.delta, cfg.pets.eta, cfg.pets.beta, cfg.pets.nms_iou};

  TrainerState state;
  state.student = source.params;
  state.static_teacher = source.params;
  state.dynamic_teacher = source.params;

  const int n = static_cast<int>(train_scenes.size());
  const int batch = cfg.optimizer.batch_size;
  const int iters_per_epoch = (n + batch - 1) / batch;
  const int64_t warmup_iters =
      std::max<int64_t>(1, static_cast<int64_t>(cfg.pets.warmup_epochs) * iters_per_epoch);
  const int decay_epoch = resolve_decay_epoch(cfg.optimizer);

  AdaptResult result;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.optimizer.epochs; ++epoch) {
    state.phase = epoch < cfg.pets.warmup_epochs ? Phase::Warmup : Phase::Adaptation;
    // exchange happens at the top of the epoch, single-teacher modes never flow
    if (use_consensus && at_period_boundary(epoch, cfg.pets.warmup_epochs))
      apply_flow(state, strategy);

    auto shuffle_rng = make_rng(cfg.data.seed, "adapt_shuffle", epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss_sum = 0.0;
    int64_t epoch_images_used = 0;
    int64_t epoch_pseudo_labels = 0;
    const bool last_epoch = epoch == cfg.optimizer.epochs - 1;

    for (int start = 0; start < n; start += batch) {
      const int end = std::min(n, start + batch);
      ParamVector grad(state.student.size(), 0.0);
      int used = 0;
      for (int b = start; b < end; ++b) {
        const Scene& scene = train_scenes[order[b]];
        const uint64_t key =
            (static_cast<uint64_t>(epoch) << 32) | static_cast<uint64_t>(scene.image_id);
        auto render_rng = make_rng(cfg.data.seed, "adapt_render", key);
        const FeatureMap fmap = render_features(scene, cfg.arch.grid, protos, domain, render_rng);
        auto aug_rng = make_rng(cfg.data.seed, "adapt_aug", key);
        auto [weak_map, weak_scene] = weak_aug(fmap, scene, aug_rng, cfg.aug.weak);
        (void)weak_scene;  // target labels stay unused during adaptation

        std::vector<PseudoLabel> pseudo;
        if (use_consensus) {
          const auto st_raw =
              decode(forward(cfg.arch, state.static_teacher, weak_map), cfg.pets.obj_thresh);
          const auto dt_raw =
              decode(forward(cfg.arch, state.dynamic_teacher, weak_map), cfg.pets.obj_thresh);
          pseudo = consensus(st_raw, dt_raw, ccfg);
        } else {
          const ParamVector& teacher = single_dt ? state.dynamic_teacher : state.static_teacher;
          const auto raw = decode(forward(cfg.arch, teacher, weak_map), cfg.pets.obj_thresh);
          for (const auto& d : confidence_filter(nms(raw, cfg.pets.nms_iou), cfg.pets.delta))
            pseudo.emplace_back(d.box, d.class_id, d.confidence);
        }
        epoch_pseudo_labels += static_cast<int64_t>(pseudo.size());
        if (last_epoch)
          for (const auto& p : pseudo) result.last_epoch_pseudo_labels.emplace_back(scene.image_id, p);
        if (pseudo.empty()) continue;  // no supervision signal, skip the image

        const FeatureMap strong_map = strong_aug(weak_map, aug_rng, cfg.aug.strong);
        std::vector<LabeledBox> labels;
        labels.reserve(pseudo.size());
        for (const auto& p : pseudo) labels.push_back(LabeledBox{p.box, p.class_id});
        const CellTargets tgts = assign_targets(labels, cfg.arch.grid);
        LossBreakdown loss;
        const ParamVector g = loss_gradient(cfg.arch, state.student, strong_map, tgts, &loss);
        if (!std::isfinite(loss.total))
          throw std::runtime_error("adaptation diverged: non-finite loss at epoch " +
                                   std::to_string(epoch));
        for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += g[k];
        epoch_loss_sum += loss.total;
        ++used;
      }
      if (used > 0) {
        for (double& g : grad) g /= used;
        const double lr =
            warmup_lr(state.iteration, warmup_iters, cfg.optimizer.base_lr) *
            (epoch >= decay_epoch ? cfg.optimizer.lr_decay : 1.0);
        state.student = sgd_step(state.student, grad, lr);
        epoch_images_used += used;
      }
      ++state.iteration;
      if (!single_st && state.iteration % cfg.pets.ema_stepsize == 0)
        ema_update(state, cfg.pets.ema_alpha);
      if (opts.record_static_checksums)
        result.static_checksums.push_back(param_checksum(state.static_teacher));
    }

    if (epoch_pseudo_labels == 0) {
      const std::string w = "epoch " + std::to_string(epoch) + " produced zero pseudo labels";
      result.warnings.push_back(w);
      if (log) (*log) << "warning: " << w << "\n";
    }

    if (epoch % cfg.eval.eval_every == 0) {
      const double mean_loss =
          epoch_images_used > 0 ? epoch_loss_sum / static_cast<double>(epoch_images_used) : 0.0;
      const struct {
        const char* role;
        const ParamVector* params;
      } roles[] = {{"student", &state.student},
                   {"static_teacher", &state.static_teacher},
                   {"dynamic_teacher", &state.dynamic_teacher}};
      for (const auto& r : roles) {
        const EvalReport rep =
            evaluate_params(cfg, *r.params, eval_scenes, domain, "eval_target_noise");
        result.curves.push_back(
            CurvePoint{epoch, r.role, rep.map50, mean_loss, epoch_pseudo_labels});
      }
      if (log) {
        (*log) << "adapt epoch " << epoch << " loss " << mean_loss << " pseudo "
               << epoch_pseudo_labels;
        for (std::size_t i = 0; i < 3; ++i)
          (*log) << " " << result.curves[result.curves.size() - 3 + i].role << " "
                 << result.curves[result.curves.size() - 3 + i].map50;
        (*log) << "\n";
      }
    }
  }

  state.phase = Phase::Adaptation;
  const ParamVector& inference = single_st ? state.student : state.dynamic_teacher;
  result.final_checkpoint =
      Checkpoint{1, cfg.arch, inference, cfg.data.seed, cfg.optimizer.epochs};
  result.final_state = std::move(state);
  return result;
}

// ---------- ablation ----------

// Row names of the ablation sweep: the five flow strategies under consensus
// plus the two single-teacher modes (consensus bypassed, no exchange).
inline const std::vector<std::string>& ablation_rows() {
  static const std::vector<std::string> rows = {"baseline", "s_to_st", "dt_to_s", "dt_to_st",
                                                "swap",     "single_dt", "single_st"};
  return rows;
}

inline ExperimentConfig ablation_config(const ExperimentConfig& base, const std::string& row,
                                        uint64_t seed) {
  ExperimentConfig cfg = base;
  cfg.data.seed = seed;
  if (row == "single_dt" || row == "single_st") {
    cfg.pets.mode = row;
    cfg.pets.strategy = "baseline";
  } else {
    cfg.pets.mode = "consensus";
    cfg.pets.strategy = row;
  }
  return cfg;
}

struct AblationRow {
  std::string row;
  uint64_t seed = 0;
  double final_map50 = 0.0;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::map<std::string, double> median_map50;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// One adapt run per (row, seed) with everything else identical; the final
// mAP of each run's inference model fills the table.
inline AblationTable run_ablation(const ExperimentConfig& base, const Checkpoint& source,
                                  std::ostream* log = nullptr) {
  AblationTable table;
  const auto eval_scenes = make_scenes(base, "eval_target_scene", base.data.num_eval_scenes);
  for (const auto& row : ablation_rows()) {
    std::vector<double> finals;
    for (uint64_t seed : base.data.seeds) {
      const ExperimentConfig cfg = ablation_config(base, row, seed);
      const AdaptResult res = adapt(cfg, source, nullptr);
      const EvalReport rep = evaluate_params(cfg, res.final_checkpoint.params, eval_scenes,
                                             target_domain(cfg), "eval_target_noise");
      table.rows.push_back(AblationRow{row, seed, rep.map50});
      finals.push_back(rep.map50);
      if (log) (*log) << "ablation " << row << " seed " << seed << " map50 " << rep.map50 << "\n";
    }
    table.median_map50[row] = median(finals);
  }
  return table;
}

// ---------- curve export ----------

// Shortest round-trip decimal form; keeps CSV output byte-stable.
inline std::string format_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string curves_to_csv(const std::vector<CurvePoint>& curves) {
  std::string out = "epoch,role,map50,mean_total_loss,num_pseudo_labels\n";
  for (const auto& c : curves) {
    out += std::to_string(c.epoch);
    out += ',';
    out += c.role;
    out += ',';
    out += format_double(c.map50);
    out += ',';
    out += format_double(c.mean_total_loss);
    out += ',';
    out += std::to_string(c.num_pseudo_labels);
    out += '\n';
  }
  return out;
}

inline void export_curves(const std::vector<CurvePoint>& curves, const std::string& path) {
  std::ofstream out(path, std::ios::binary);  // binary keeps LF endings everywhere
  if (!out) throw std::runtime_error("cannot write curves: " + path);
  out << curves_to_csv(curves);
}

// ---------- checkpoint files with trainer state ----------

inline nlohmann::json trainer_state_to_json(const TrainerState& state) {
  return nlohmann::json{{"student", state.student},
                        {"static_teacher", state.static_teacher},
                        {"dynamic_teacher", state.dynamic_teacher},
                        {"period", state.period},
                        {"iteration", state.iteration},
                        {"phase", to_string(state.phase)}};
}

inline TrainerState trainer_state_from_json(const nlohmann::json& j) {
  TrainerState state;
  state.student = j.at("student").get<ParamVector>();
  state.static_teacher = j.at("static_teacher").get<ParamVector>();
  state.dynamic_teacher = j.at("dynamic_teacher").get<ParamVector>();
  state.period = j.at("period").get<int64_t>();
  state.iteration = j.at("iteration").get<int64_t>();
  state.phase = phase_from_string(j.at("phase").get<std::string>());
  check_state(state);
  return state;
}

inline void save_checkpoint_file(const std::string& path, const Checkpoint& ckpt,
                                 const TrainerState* state = nullptr) {
  nlohmann::json j = checkpoint_to_json(ckpt);
  if (state) j["trainer_state"] = trainer_state_to_json(*state);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << j.dump() << "\n";
}

struct LoadedCheckpoint {
  Checkpoint checkpoint;
  std::optional<TrainerState> state;
};

inline LoadedCheckpoint load_checkpoint_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  nlohmann::json j;
  in >> j;
  LoadedCheckpoint loaded;
  loaded.checkpoint = checkpoint_from_json(j);
  if (j.contains("trainer_state")) loaded.state = trainer_state_from_json(j.at("trainer_state"));
  return loaded;
}

// ---------- self-check ----------

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SelfcheckOptions {
  uint64_t seed = 1;
  bool corrupt_gradient = false;  // test hook: flips one gradient coordinate
};

namespace detail {

// Small random instance for the gradient check.
inline void random_instance(std::mt19937_64& rng, DetectorArch& arch, ParamVector& params,
                            FeatureMap& fmap, CellTargets& targets) {
  std::uniform_int_distribution<int> gdist(2, 4), cdist(2, 4), kdist(2, 3), hdist(0, 6);
  arch = DetectorArch{gdist(rng), cdist(rng), kdist(rng), hdist(rng)};
  std::normal_distribution<double> gauss(0.0, 0.6);
  params.resize(arch.param_count());
  for (double& p : params) p = gauss(rng);
  fmap = FeatureMap::zeros(arch.grid, arch.channels);
  for (double& v : fmap.values) v = gauss(rng);
  std::uniform_int_distribution<int> count(1, 2), cls(0, arch.num_classes - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<LabeledBox> labels;
  const int num = count(rng);
  for (int i = 0; i < num; ++i) {
    const double w = 0.2 + 0.3 * unit(rng);
    const double h = 0.2 + 0.3 * unit(rng);
    const double x1 = (1.0 - w) * unit(rng);
    const double y1 = (1.0 - h) * unit(rng);
    labels.push_back(LabeledBox{BoxRect(x1, y1, x1 + w, y1 + h), cls(rng)});
  }
  targets = assign_targets(labels, arch.grid);
}

}  // namespace detail

// Runs the built-in oracle battery; every check must pass on a fresh build.
inline std::vector<CheckResult> selfcheck(const SelfcheckOptions& opts = {}) {
  std::vector<CheckResult> results;
  std::ostringstream detail;

  {  // analytic gradient vs central finite differences
    auto rng = make_rng(opts.seed, "selfcheck_grad");
    double worst = 0.0;
    for (int inst = 0; inst < 3; ++inst) {
      DetectorArch arch;
      ParamVector params;
      FeatureMap fmap;
      CellTargets targets;
      detail::random_instance(rng, arch, params, fmap, targets);
      ParamVector analytic = loss_gradient(arch, params, fmap, targets);
      if (opts.corrupt_gradient) {
        std::size_t arg = 0;
        for (std::size_t i = 1; i < analytic.size(); ++i)
          if (std::fabs(analytic[i]) > std::fabs(analytic[arg])) arg = i;
        analytic[arg] = -analytic[arg] - 1.0;
      }
      const ParamVector numeric = fd_loss_gradient(arch, params, fmap, targets);
      for (std::size_t i = 0; i < analytic.size(); ++i)
        worst = std::max(worst, gradient_rel_error(analytic[i], numeric[i]));
    }
    detail.str("");
    detail << "max rel err " << worst;
    results.push_back({"gradient_finite_difference", worst < 1e-4, detail.str()});
  }

  {  // weighted fusion vs direct summation, via the line-record format
    auto rng = make_rng(opts.seed, "selfcheck_wbf");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> size_dist(1, 4);
    double worst = 0.0;
    bool ok = true;
    for (int inst = 0; inst < 100 && ok; ++inst) {
      const int cls = inst % 3;
      auto cluster = [&](int n) {
        std::vector<Detection> dets;
        for (int i = 0; i < n; ++i) {
          const double x1 = 0.1 + 0.3 * unit(rng);
          const double y1 = 0.1 + 0.3 * unit(rng);
          const double w = 0.1 + 0.3 * unit(rng);
          const double h = 0.1 + 0.3 * unit(rng);
          Detection d(BoxRect(x1, y1, x1 + w, y1 + h), cls, 0.05 + 0.95 * unit(rng));
          // shuttle through the serialized record
          dets.push_back(detection_from_record(detection_record(inst, d)));
        }
        return dets;
      };
      const auto st = cluster(size_dist(rng));
      const auto dt = cluster(size_dist(rng));
      const double beta = unit(rng);
      const PseudoLabel fused = wbf_fuse(st, dt, beta);
      const WbfReference ref = wbf_fuse_reference(st, dt, beta);
      worst = std::max({worst, std::fabs(fused.box.x1 - ref.x1), std::fabs(fused.box.y1 - ref.y1),
                        std::fabs(fused.box.x2 - ref.x2), std::fabs(fused.box.y2 - ref.y2),
                        std::fabs(fused.fused_confidence - ref.confidence)});
      const PseudoLabel other_beta = wbf_fuse(st, dt, 1.0 - beta);
      if (!(other_beta.box == fused.box)) ok = false;  // box must ignore beta
      const PseudoLabel swapped = wbf_fuse(dt, st, 0.5);
      const PseudoLabel straight = wbf_fuse(st, dt, 0.5);
      if (!(swapped.box == straight.box) ||
          swapped.fused_confidence != straight.fused_confidence)
        ok = false;
    }
    detail.str("");
    detail << "max abs err " << worst;
    results.push_back({"wbf_brute_force", ok && worst < 1e-9, detail.str()});
  }

  {  // EMA geometric series
    auto rng = make_rng(opts.seed, "selfcheck_ema");
    std::normal_distribution<double> gauss(0.0, 1.0);
    TrainerState state;
    state.student.resize(8);
    state.dynamic_teacher.resize(8);
    state.static_teacher.assign(8, 0.0);
    for (double& v : state.student) v = gauss(rng);
    for (double& v : state.dynamic_teacher) v = gauss(rng);
    const ParamVector initial_err = [&] {
      ParamVector e(8);
      for (int i = 0; i < 8; ++i) e[i] = state.dynamic_teacher[i] - state.student[i];
      return e;
    }();
    const double alpha = 0.999;
    long double factor = 1.0L;
    double worst = 0.0;
    for (int k = 1; k <= 1000; ++k) {
      ema_update(state, alpha);
      factor *= alpha;
      for (int i = 0; i < 8; ++i) {
        const double expect = static_cast<double>(factor * initial_err[i]);
        worst = std::max(worst,
                         std::fabs((state.dynamic_teacher[i] - state.student[i]) - expect));
      }
    }
    detail.str("");
    detail << "max abs err " << worst;
    results.push_back({"ema_geometric_series", worst < 1e-9, detail.str()});
  }

  {  // swap involution
    auto rng = make_rng(opts.seed, "selfcheck_swap");
    std::normal_distribution<double> gauss(0.0, 1.0);
    TrainerState state;
    state.student.resize(16);
    state.static_teacher.resize(16);
    state.dynamic_teacher.resize(16);
    for (double& v : state.student) v = gauss(rng);
    for (double& v : state.static_teacher) v = gauss(rng);
    for (double& v : state.dynamic_teacher) v = gauss(rng);
    const TrainerState before = state;
    apply_flow(state, FlowStrategy::Swap);
    bool ok = state.student == before.static_teacher && state.static_teacher == before.student &&
              state.dynamic_teacher == before.dynamic_teacher;
    apply_flow(state, FlowStrategy::Swap);
    ok = ok && state.student == before.student && state.static_teacher == before.static_teacher &&
         state.period == before.period + 2;
    results.push_back({"exchange_involution", ok, ok ? "bit-exact" : "mismatch"});
  }

  {  // AP hand cases
    const double perfect = average_precision({{0.9, true}, {0.8, true}, {0.7, true}}, 3);
    const double empty = average_precision({}, 2);
    const double mixed = average_precision({{0.9, true}, {0.8, false}, {0.7, true}}, 2);
    const bool ok = perfect == 1.0 && empty == 0.0 && std::fabs(mixed - 5.0 / 6.0) < 1e-12;
    detail.str("");
    detail << "perfect " << perfect << " empty " << empty << " mixed " << mixed;
    results.push_back({"ap_hand_cases", ok, detail.str()});
  }

  return results;
}

}  // namespace pets
