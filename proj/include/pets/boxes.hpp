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

// Box geometry, filtering, matching, NMS and the weighted-boxes-fusion
// consensus step that merges the two teachers' predictions into pseudo
// labels.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace pets {

// Axis-aligned box in normalized coordinates over the unit image square.
// Degenerate (zero-area) boxes are rejected at construction.
struct BoxRect {
  double x1, y1, x2, y2;

  BoxRect(double x1_, double y1_, double x2_, double y2_)
      : x1(x1_), y1(y1_), x2(x2_), y2(y2_) {
    if (!(x1 >= 0.0 && x1 < x2 && x2 <= 1.0 && y1 >= 0.0 && y1 < y2 && y2 <= 1.0)) {
      throw std::invalid_argument(
          "BoxRect: need 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1");
    }
  }

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }

  bool operator==(const BoxRect& o) const {
    return x1 == o.x1 && y1 == o.y1 && x2 == o.x2 && y2 == o.y2;
  }
};

struct Detection {
  BoxRect box;
  int class_id;
  double confidence;

  Detection(BoxRect b, int cls, double conf) : box(b), class_id(cls), confidence(conf) {
    if (cls < 0) throw std::invalid_argument("Detection: class_id must be non-negative");
    if (!(conf >= 0.0 && conf <= 1.0))
      throw std::invalid_argument("Detection: confidence must lie in [0,1]");
  }
};

struct PseudoLabel {
  BoxRect box;
  int class_id;
  double fused_confidence;

  PseudoLabel(BoxRect b, int cls, double conf) : box(b), class_id(cls), fused_confidence(conf) {
    if (cls < 0) throw std::invalid_argument("PseudoLabel: class_id must be non-negative");
    if (!(conf >= 0.0 && conf <= 1.0))
      throw std::invalid_argument("PseudoLabel: fused_confidence must lie in [0,1]");
  }
};

// A ground-truth annotation: box plus category.
struct LabeledBox {
  BoxRect box;
  int class_id;
};

struct ConsensusConfig {
  double delta = 0.5;    // confidence threshold applied to both teachers
  double eta = 0.5;      // IoU threshold for same-object matching
  double beta = 0.5;     // confidence fusion weight (static-teacher share)
  double nms_iou = 0.5;  // per-class suppression threshold
};

inline void validate(const ConsensusConfig& cfg) {
  auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in01(cfg.delta) || !in01(cfg.eta) || !in01(cfg.beta) || !in01(cfg.nms_iou))
    throw std::invalid_argument("ConsensusConfig: all thresholds must lie in [0,1]");
}

inline double iou(const BoxRect& a, const BoxRect& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double inter = std::max(0.0, iw) * std::max(0.0, ih);
  // valid boxes have positive area, so the union is never zero
  return inter / (a.area() + b.area() - inter);
}

inline std::vector<Detection> confidence_filter(const std::vector<Detection>& dets,
                                                double delta) {
  if (!(delta >= 0.0 && delta <= 1.0))
    throw std::invalid_argument("confidence_filter: delta must lie in [0,1]");
  std::vector<Detection> kept;
  kept.reserve(dets.size());
  for (const auto& d : dets)
    if (d.confidence >= delta) kept.push_back(d);
  return kept;
}

// Greedy per-class suppression. A detection survives iff its IoU with every
// already-kept detection of the same class stays below nms_iou. Candidates
// are visited by (confidence desc, x1 asc, y1 asc) so the result does not
// depend on input order.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double nms_iou) {
  if (!(nms_iou >= 0.0 && nms_iou <= 1.0))
    throw std::invalid_argument("nms: threshold must lie in [0,1]");
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const Detection& da = dets[a];
    const Detection& db = dets[b];
    if (da.confidence != db.confidence) return da.confidence > db.confidence;
    if (da.box.x1 != db.box.x1) return da.box.x1 < db.box.x1;
    if (da.box.y1 != db.box.y1) return da.box.y1 < db.box.y1;
    return a < b;
  });
  std::vector<Detection> kept;
  for (std::size_t idx : order) {
    const Detection& d = dets[idx];
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id == d.class_id && iou(k.box, d.box) >= nms_iou) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

// One-to-one greedy matching between the two teachers' predictions.
// Candidate pairs must share the class and reach IoU >= eta; they are
// accepted by (IoU desc, confidence sum desc, index order), each detection
// used at most once. Unmatched detections are dropped by the caller.
inline std::vector<std::pair<Detection, Detection>> match_pairs(
    const std::vector<Detection>& st, const std::vector<Detection>& dt, double eta) {
  if (!(eta >= 0.0 && eta <= 1.0))
    throw std::invalid_argument("match_pairs: eta must lie in [0,1]");
  struct Candidate {
    double overlap;
    double conf_sum;
    std::size_t i, j;
  };
  std::vector<Candidate> cands;
  for (std::size_t i = 0; i < st.size(); ++i) {
    for (std::size_t j = 0; j < dt.size(); ++j) {
      if (st[i].class_id != dt[j].class_id) continue;
      const double v = iou(st[i].box, dt[j].box);
      if (v >= eta) cands.push_back({v, st[i].confidence + dt[j].confidence, i, j});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.overlap != b.overlap) return a.overlap > b.overlap;
    if (a.conf_sum != b.conf_sum) return a.conf_sum > b.conf_sum;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });
  std::vector<bool> used_st(st.size(), false), used_dt(dt.size(), false);
  std::vector<std::pair<Detection, Detection>> pairs;
  for (const auto& c : cands) {
    if (used_st[c.i] || used_dt[c.j]) continue;
    used_st[c.i] = used_dt[c.j] = true;
    pairs.emplace_back(st[c.i], dt[c.j]);
  }
  return pairs;
}

// Confidence-weighted fusion of two box clusters belonging to one object.
// Fused coordinates are the confidence-weighted mean over both clusters;
// the fused confidence mixes the per-cluster means with weight beta on the
// static-teacher side. The fused class follows the static-teacher cluster.
// Cluster sums are accumulated separately so that swapping the clusters at
// beta=0.5 is bit-exact.
inline PseudoLabel wbf_fuse(const std::vector<Detection>& st_cluster,
                            const std::vector<Detection>& dt_cluster, double beta) {
  if (st_cluster.empty() || dt_cluster.empty())
    throw std::invalid_argument("wbf_fuse: both clusters must be non-empty");
  if (!(beta >= 0.0 && beta <= 1.0))
    throw std::invalid_argument("wbf_fuse: beta must lie in [0,1]");
  const int cls = st_cluster.front().class_id;
  double coord_st[4] = {0, 0, 0, 0};
  double coord_dt[4] = {0, 0, 0, 0};
  double conf_st = 0.0, conf_dt = 0.0;
  for (const auto& d : st_cluster) {
    if (d.class_id != cls) throw std::invalid_argument("wbf_fuse: mixed classes in cluster");
    coord_st[0] += d.confidence * d.box.x1;
    coord_st[1] += d.confidence * d.box.y1;
    coord_st[2] += d.confidence * d.box.x2;
    coord_st[3] += d.confidence * d.box.y2;
    conf_st += d.confidence;
  }
  for (const auto& d : dt_cluster) {
    if (d.class_id != cls) throw std::invalid_argument("wbf_fuse: mixed classes in cluster");
    coord_dt[0] += d.confidence * d.box.x1;
    coord_dt[1] += d.confidence * d.box.y1;
    coord_dt[2] += d.confidence * d.box.x2;
    coord_dt[3] += d.confidence * d.box.y2;
    conf_dt += d.confidence;
  }
  const double total = conf_st + conf_dt;
  if (total <= 0.0)
    throw std::invalid_argument("wbf_fuse: total cluster confidence must be positive");
  BoxRect fused((coord_st[0] + coord_dt[0]) / total, (coord_st[1] + coord_dt[1]) / total,
                (coord_st[2] + coord_dt[2]) / total, (coord_st[3] + coord_dt[3]) / total);
  const double mean_st = conf_st / static_cast<double>(st_cluster.size());
  const double mean_dt = conf_dt / static_cast<double>(dt_cluster.size());
  const double fused_conf = beta * mean_st + (1.0 - beta) * mean_dt;
  return PseudoLabel(fused, cls, fused_conf);
}

// Full consensus pipeline for one image: per-class NMS, confidence filter,
// one-to-one matching, weighted fusion per matched pair. An empty result is
// a legal outcome; the caller skips the image.
inline std::vector<PseudoLabel> consensus(const std::vector<Detection>& st_raw,
                                          const std::vector<Detection>& dt_raw,
                                          const ConsensusConfig& cfg) {
  validate(cfg);
  const auto st = confidence_filter(nms(st_raw, cfg.nms_iou), cfg.delta);
  const auto dt = confidence_filter(nms(dt_raw, cfg.nms_iou), cfg.delta);
  std::vector<PseudoLabel> out;
  for (const auto& [a, b] : match_pairs(st, dt, cfg.eta)) {
    out.push_back(wbf_fuse({a}, {b}, cfg.beta));
  }
  return out;
}

// ---------- line-oriented JSON records ----------

inline nlohmann::json detection_record(int64_t image_id, const Detection& d) {
  return nlohmann::json{{"image_id", image_id},   {"class_id", d.class_id},
                        {"x1", d.box.x1},         {"y1", d.box.y1},
                        {"x2", d.box.x2},         {"y2", d.box.y2},
                        {"confidence", d.confidence}};
}

inline nlohmann::json pseudo_label_record(int64_t image_id, const PseudoLabel& p) {
  return nlohmann::json{{"image_id", image_id},   {"class_id", p.class_id},
                        {"x1", p.box.x1},         {"y1", p.box.y1},
                        {"x2", p.box.x2},         {"y2", p.box.y2},
                        {"confidence", p.fused_confidence}};
}

inline Detection detection_from_record(const nlohmann::json& rec, int64_t* image_id = nullptr) {
  if (image_id) *image_id = rec.at("image_id").get<int64_t>();
  return Detection(BoxRect(rec.at("x1").get<double>(), rec.at("y1").get<double>(),
                           rec.at("x2").get<double>(), rec.at("y2").get<double>()),
                   rec.at("class_id").get<int>(), rec.at("confidence").get<double>());
}

}  // namespace pets
