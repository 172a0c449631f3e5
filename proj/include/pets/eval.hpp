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

// Detection evaluation: greedy matching against ground truth and
// all-points average precision at a fixed IoU threshold.

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pets/boxes.hpp"

namespace pets {

struct EvalReport {
  std::map<int, double> per_class_ap;  // classes with >= 1 ground-truth instance
  double map50 = 0.0;
};

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [cls, ap] : r.per_class_ap) per_class[std::to_string(cls)] = ap;
  return nlohmann::json{{"per_class_ap", per_class}, {"map50", r.map50}};
}

// Flags each detection of one image as TP or FP. Detections are visited by
// (confidence desc, x1 asc, y1 asc); a detection is a TP iff its best-IoU
// unmatched same-class ground truth reaches iou_thresh, and that ground
// truth is then consumed.
inline std::vector<std::pair<Detection, bool>> flag_tp_fp(std::vector<Detection> dets,
                                                          const std::vector<LabeledBox>& gts,
                                                          double iou_thresh) {
  if (!(iou_thresh >= 0.0 && iou_thresh <= 1.0))
    throw std::invalid_argument("flag_tp_fp: iou_thresh must lie in [0,1]");
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
    return a.box.y1 < b.box.y1;
  });
  std::vector<bool> used(gts.size(), false);
  std::vector<std::pair<Detection, bool>> out;
  out.reserve(dets.size());
  for (const auto& d : dets) {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].class_id != d.class_id) continue;
      const double v = iou(d.box, gts[g].box);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    const bool tp = best >= 0 && best_iou >= iou_thresh;
    if (tp) used[best] = true;
    out.emplace_back(d, tp);
  }
  return out;
}

// All-points average precision: area under the precision envelope of the
// confidence-sorted PR curve. flags pair each detection's confidence with
// its TP flag; num_gt is the total ground-truth count of the class.
inline double average_precision(std::vector<std::pair<double, bool>> flags, int num_gt) {
  if (num_gt < 0) throw std::invalid_argument("average_precision: num_gt must be >= 0");
  if (num_gt == 0 || flags.empty()) return 0.0;
  std::stable_sort(flags.begin(), flags.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  const std::size_t n = flags.size();
  std::vector<double> recall(n), precision(n);
  int tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += flags[i].second ? 1 : 0;
    recall[i] = static_cast<double>(tp) / num_gt;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  double ap = 0.0;
  double envelope = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    envelope = std::max(envelope, precision[i]);
    const double prev = i > 0 ? recall[i - 1] : 0.0;
    if (recall[i] > prev) ap += (recall[i] - prev) * envelope;
  }
  return ap;
}

using DetectionsByImage = std::map<int64_t, std::vector<Detection>>;
using GroundTruthByImage = std::map<int64_t, std::vector<LabeledBox>>;

// Per-class AP over all images, averaged into mAP. Classes absent from the
// ground truth are excluded from the mean; classes present but never
// predicted contribute zero.
inline EvalReport evaluate(const DetectionsByImage& dets_by_image,
                           const GroundTruthByImage& gts_by_image, double iou_thresh = 0.5) {
  std::map<int, int> gt_counts;
  for (const auto& [id, gts] : gts_by_image)
    for (const auto& g : gts) gt_counts[g.class_id] += 1;

  std::map<int, std::vector<std::pair<double, bool>>> flags_by_class;
  for (const auto& [id, dets] : dets_by_image) {
    const auto git = gts_by_image.find(id);
    static const std::vector<LabeledBox> kNoGts;
    const auto& gts = git != gts_by_image.end() ? git->second : kNoGts;
    for (const auto& [det, tp] : flag_tp_fp(dets, gts, iou_thresh)) {
      if (gt_counts.count(det.class_id))
        flags_by_class[det.class_id].emplace_back(det.confidence, tp);
    }
  }

  EvalReport report;
  double sum = 0.0;
  for (const auto& [cls, count] : gt_counts) {
    const auto it = flags_by_class.find(cls);
    const double ap = it != flags_by_class.end() ? average_precision(it->second, count) : 0.0;
    report.per_class_ap[cls] = ap;
    sum += ap;
  }
  report.map50 = gt_counts.empty() ? 0.0 : sum / static_cast<double>(gt_counts.size());
  return report;
}

}  // namespace pets
