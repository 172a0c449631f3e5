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

// Independent reference implementations used by the self-check command and
// the test suites. None of these share code with the implementation paths
// they validate: the gradient oracle only calls forward/detection_loss, the
// fusion oracle evaluates the weighted sums directly in extended precision,
// and the AP oracle integrates the PR curve with a quadratic envelope scan.

#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "pets/boxes.hpp"
#include "pets/model.hpp"

namespace pets {

// Central finite differences of the total detection loss.
inline ParamVector fd_loss_gradient(const DetectorArch& arch, const ParamVector& params,
                                    const FeatureMap& fmap, const CellTargets& targets,
                                    double step = 1e-5) {
  ParamVector grad(params.size(), 0.0);
  ParamVector probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + step;
    const double plus = detection_loss(forward(arch, probe, fmap), targets).total;
    probe[i] = saved - step;
    const double minus = detection_loss(forward(arch, probe, fmap), targets).total;
    probe[i] = saved;
    grad[i] = (plus - minus) / (2.0 * step);
  }
  return grad;
}

// |a - b| relative to max(1, |a|, |b|); the gradient-check metric.
inline double gradient_rel_error(double analytic, double numeric) {
  return std::fabs(analytic - numeric) /
         std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
}

// Direct evaluation of the confidence-weighted fusion in extended precision.
struct WbfReference {
  double x1, y1, x2, y2;
  double confidence;
};

inline WbfReference wbf_fuse_reference(const std::vector<Detection>& st_cluster,
                                       const std::vector<Detection>& dt_cluster, double beta) {
  long double num[4] = {0, 0, 0, 0};
  long double conf_total = 0.0L;
  long double st_sum = 0.0L, dt_sum = 0.0L;
  for (const auto& d : st_cluster) {
    const long double c = d.confidence;
    num[0] += c * d.box.x1;
    num[1] += c * d.box.y1;
    num[2] += c * d.box.x2;
    num[3] += c * d.box.y2;
    st_sum += c;
  }
  for (const auto& d : dt_cluster) {
    const long double c = d.confidence;
    num[0] += c * d.box.x1;
    num[1] += c * d.box.y1;
    num[2] += c * d.box.x2;
    num[3] += c * d.box.y2;
    dt_sum += c;
  }
  conf_total = st_sum + dt_sum;
  WbfReference r{};
  r.x1 = static_cast<double>(num[0] / conf_total);
  r.y1 = static_cast<double>(num[1] / conf_total);
  r.x2 = static_cast<double>(num[2] / conf_total);
  r.y2 = static_cast<double>(num[3] / conf_total);
  r.confidence = static_cast<double>(
      static_cast<long double>(beta) * (st_sum / st_cluster.size()) +
      static_cast<long double>(1.0 - beta) * (dt_sum / dt_cluster.size()));
  return r;
}

// Brute-force PR integration: for every recall step, scan the whole curve
// for the best precision at or beyond that recall.
inline double average_precision_reference(std::vector<std::pair<double, bool>> flags,
                                          int num_gt) {
  if (num_gt <= 0 || flags.empty()) return 0.0;
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
  for (std::size_t i = 0; i < n; ++i) {
    if (!flags[i].second) continue;
    const double prev = i > 0 ? recall[i - 1] : 0.0;
    double best = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (recall[j] >= recall[i]) best = std::max(best, precision[j]);
    ap += (recall[i] - prev) * best;
  }
  return ap;
}

}  // namespace pets
