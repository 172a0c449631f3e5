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

// A toy two-head grid detector with hand-written gradients.
//
// Every grid cell is scored independently by shared weights:
//   trunk:  u = relu(W0 x + b0)            (skipped when hidden == 0)
//   head A: (o, dx, dy, dw, dh) = WA u + bA
//   head B: (z_0..z_{K-1}, rx, ry, rw, rh) = WB [u; sigmoid(o)] + bB
// o is the objectness logit, (dx,dy,dw,dh) the coarse box offsets, z the
// class logits and (rx,ry,rw,rh) the refinement offsets. The training loss
// is the usual four-term detection loss: objectness BCE over all cells plus
// box regression and classification terms over positive cells.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pets/boxes.hpp"

namespace pets {

// Flat weight container; the unit of EMA, exchange and SGD.
using ParamVector = std::vector<double>;

struct DetectorArch {
  int grid = 12;
  int channels = 8;
  int num_classes = 3;
  int hidden = 16;

  int trunk_dim() const { return hidden > 0 ? hidden : channels; }
  int head_b_in() const { return trunk_dim() + 1; }
  int head_b_out() const { return num_classes + 4; }

  // layout: [W0 (hidden x channels), b0][WA (5 x trunk), bA][WB ((K+4) x (trunk+1)), bB]
  std::size_t param_count() const {
    std::size_t n = 0;
    if (hidden > 0) n += static_cast<std::size_t>(hidden) * channels + hidden;
    n += 5u * trunk_dim() + 5u;
    n += static_cast<std::size_t>(head_b_out()) * head_b_in() + head_b_out();
    return n;
  }

  bool operator==(const DetectorArch& o) const {
    return grid == o.grid && channels == o.channels && num_classes == o.num_classes &&
           hidden == o.hidden;
  }
};

inline void validate(const DetectorArch& arch) {
  if (arch.grid < 1 || arch.channels < 1 || arch.num_classes < 1 || arch.hidden < 0)
    throw std::invalid_argument("DetectorArch: grid/channels/num_classes must be >= 1, hidden >= 0");
}

struct FeatureMap {
  int grid = 0;
  int channels = 0;
  std::vector<double> values;  // index ((y * grid) + x) * channels + c

  static FeatureMap zeros(int grid, int channels) {
    FeatureMap f;
    f.grid = grid;
    f.channels = channels;
    f.values.assign(static_cast<std::size_t>(grid) * grid * channels, 0.0);
    return f;
  }
  double& at(int x, int y, int c) {
    return values[(static_cast<std::size_t>(y) * grid + x) * channels + c];
  }
  double at(int x, int y, int c) const {
    return values[(static_cast<std::size_t>(y) * grid + x) * channels + c];
  }
  const double* cell(int x, int y) const {
    return values.data() + (static_cast<std::size_t>(y) * grid + x) * channels;
  }
};

struct CellPredictions {
  int grid = 0;
  int num_classes = 0;
  std::vector<double> values;  // per cell: [o, dx, dy, dw, dh, z_0.., rx, ry, rw, rh]

  int stride() const { return 9 + num_classes; }
  double* cell(int x, int y) {
    return values.data() + (static_cast<std::size_t>(y) * grid + x) * stride();
  }
  const double* cell(int x, int y) const {
    return values.data() + (static_cast<std::size_t>(y) * grid + x) * stride();
  }
};

// Per-cell training targets. The same encoded offsets supervise both the
// coarse and the refinement head.
struct CellTargets {
  int grid = 0;
  std::vector<uint8_t> positive;  // grid*grid flags
  std::vector<int> class_id;      // -1 where negative
  std::vector<double> offsets;    // 4 per cell: dx, dy, log(w*G), log(h*G)

  int num_positive() const {
    int n = 0;
    for (uint8_t f : positive) n += f;
    return n;
  }
};

struct LossBreakdown {
  double rpn_cls = 0.0;
  double rpn_reg = 0.0;
  double roi_cls = 0.0;
  double roi_reg = 0.0;
  double total = 0.0;
};

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double bce_with_logit(double logit, double target) {
  return std::max(logit, 0.0) - logit * target + std::log1p(std::exp(-std::fabs(logit)));
}

inline double smooth_l1(double e) {
  const double a = std::fabs(e);
  return a < 1.0 ? 0.5 * e * e : a - 0.5;
}

inline double smooth_l1_grad(double e) { return std::clamp(e, -1.0, 1.0); }

inline void check_params(const DetectorArch& arch, const ParamVector& params) {
  if (params.size() != arch.param_count())
    throw std::invalid_argument("parameter vector length does not match architecture");
}

inline void check_feature_map(const DetectorArch& arch, const FeatureMap& fmap) {
  if (fmap.grid != arch.grid || fmap.channels != arch.channels ||
      fmap.values.size() != static_cast<std::size_t>(arch.grid) * arch.grid * arch.channels)
    throw std::invalid_argument("feature map shape does not match architecture");
}

namespace detail {

// Pointers into the flat parameter vector, shared by forward and backward.
struct ParamView {
  const double* W0;
  const double* b0;
  const double* WA;
  const double* bA;
  const double* WB;
  const double* bB;
};

inline ParamView slice_params(const DetectorArch& arch, const double* p) {
  ParamView v{};
  const int U = arch.trunk_dim();
  if (arch.hidden > 0) {
    v.W0 = p;
    v.b0 = p + static_cast<std::size_t>(arch.hidden) * arch.channels;
    v.WA = v.b0 + arch.hidden;
  } else {
    v.W0 = nullptr;
    v.b0 = nullptr;
    v.WA = p;
  }
  v.bA = v.WA + 5 * U;
  v.WB = v.bA + 5;
  v.bB = v.WB + static_cast<std::size_t>(arch.head_b_out()) * arch.head_b_in();
  return v;
}

struct ParamViewMut {
  double* W0;
  double* b0;
  double* WA;
  double* bA;
  double* WB;
  double* bB;
};

inline ParamViewMut slice_params_mut(const DetectorArch& arch, double* p) {
  const ParamView v = slice_params(arch, p);
  return ParamViewMut{const_cast<double*>(v.W0), const_cast<double*>(v.b0),
                      const_cast<double*>(v.WA), const_cast<double*>(v.bA),
                      const_cast<double*>(v.WB), const_cast<double*>(v.bB)};
}

// Runs the per-cell network. pre_relu/trunk must hold trunk_dim() doubles;
// out must hold 9+K doubles laid out as in CellPredictions.
inline void forward_cell(const DetectorArch& arch, const ParamView& w, const double* x,
                         double* pre_relu, double* trunk, double* out) {
  const int C = arch.channels;
  const int U = arch.trunk_dim();
  const int K = arch.num_classes;
  if (arch.hidden > 0) {
    for (int h = 0; h < U; ++h) {
      double s = w.b0[h];
      const double* row = w.W0 + static_cast<std::size_t>(h) * C;
      for (int c = 0; c < C; ++c) s += row[c] * x[c];
      pre_relu[h] = s;
      trunk[h] = s > 0.0 ? s : 0.0;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      pre_relu[c] = x[c];
      trunk[c] = x[c];
    }
  }
  for (int j = 0; j < 5; ++j) {
    double s = w.bA[j];
    const double* row = w.WA + static_cast<std::size_t>(j) * U;
    for (int i = 0; i < U; ++i) s += row[i] * trunk[i];
    out[j] = s;
  }
  const double p = sigmoid(out[0]);
  for (int j = 0; j < K + 4; ++j) {
    double s = w.bB[j];
    const double* row = w.WB + static_cast<std::size_t>(j) * (U + 1);
    for (int i = 0; i < U; ++i) s += row[i] * trunk[i];
    s += row[U] * p;
    out[5 + j] = s;
  }
}

}  // namespace detail

inline CellPredictions forward(const DetectorArch& arch, const ParamVector& params,
                               const FeatureMap& fmap) {
  validate(arch);
  check_params(arch, params);
  check_feature_map(arch, fmap);
  const int G = arch.grid;
  const int U = arch.trunk_dim();
  CellPredictions preds;
  preds.grid = G;
  preds.num_classes = arch.num_classes;
  preds.values.assign(static_cast<std::size_t>(G) * G * preds.stride(), 0.0);
  const detail::ParamView w = detail::slice_params(arch, params.data());
  std::vector<double> pre(U), trunk(U);
  for (int y = 0; y < G; ++y) {
    for (int x = 0; x < G; ++x) {
      detail::forward_cell(arch, w, fmap.cell(x, y), pre.data(), trunk.data(),
                           preds.cell(x, y));
    }
  }
  return preds;
}

// A cell is positive iff some box center falls in it; the first-listed box
// wins contested cells. Offsets are encoded against the cell anchor:
// (dx, dy) is the center displacement in cell units, (dw, dh) the log box
// size in cell units.
inline CellTargets assign_targets(const std::vector<LabeledBox>& labels, int grid) {
  if (grid < 1) throw std::invalid_argument("assign_targets: grid must be >= 1");
  CellTargets t;
  t.grid = grid;
  t.positive.assign(static_cast<std::size_t>(grid) * grid, 0);
  t.class_id.assign(static_cast<std::size_t>(grid) * grid, -1);
  t.offsets.assign(static_cast<std::size_t>(grid) * grid * 4, 0.0);
  for (const auto& lb : labels) {
    const double cx = lb.box.cx();
    const double cy = lb.box.cy();
    const int ix = std::min(static_cast<int>(cx * grid), grid - 1);
    const int iy = std::min(static_cast<int>(cy * grid), grid - 1);
    const std::size_t idx = static_cast<std::size_t>(iy) * grid + ix;
    if (t.positive[idx]) continue;
    t.positive[idx] = 1;
    t.class_id[idx] = lb.class_id;
    t.offsets[4 * idx + 0] = cx * grid - (ix + 0.5);
    t.offsets[4 * idx + 1] = cy * grid - (iy + 0.5);
    t.offsets[4 * idx + 2] = std::log(lb.box.width() * grid);
    t.offsets[4 * idx + 3] = std::log(lb.box.height() * grid);
  }
  return t;
}

inline void check_shapes(const CellPredictions& preds, const CellTargets& targets) {
  if (preds.grid != targets.grid ||
      targets.positive.size() != static_cast<std::size_t>(targets.grid) * targets.grid ||
      targets.offsets.size() != targets.positive.size() * 4)
    throw std::invalid_argument("predictions and targets have mismatched shapes");
}

// Four-term detection loss: objectness BCE averaged over all cells, plus
// smooth-L1 box terms and softmax cross-entropy averaged over positive
// cells. Positive-only terms are zero when no cell is positive.
inline LossBreakdown detection_loss(const CellPredictions& preds, const CellTargets& targets) {
  check_shapes(preds, targets);
  const int G = preds.grid;
  const int K = preds.num_classes;
  LossBreakdown loss;
  int num_pos = 0;
  for (int y = 0; y < G; ++y) {
    for (int x = 0; x < G; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * G + x;
      const double* cell = preds.cell(x, y);
      const bool pos = targets.positive[idx] != 0;
      loss.rpn_cls += bce_with_logit(cell[0], pos ? 1.0 : 0.0);
      if (!pos) continue;
      ++num_pos;
      const double* off = &targets.offsets[4 * idx];
      for (int k = 0; k < 4; ++k) loss.rpn_reg += smooth_l1(cell[1 + k] - off[k]);
      const double* z = cell + 5;
      double zmax = z[0];
      for (int k = 1; k < K; ++k) zmax = std::max(zmax, z[k]);
      double sum = 0.0;
      for (int k = 0; k < K; ++k) sum += std::exp(z[k] - zmax);
      loss.roi_cls += std::log(sum) + zmax - z[targets.class_id[idx]];
      for (int k = 0; k < 4; ++k) loss.roi_reg += smooth_l1(cell[5 + K + k] - off[k]);
    }
  }
  loss.rpn_cls /= static_cast<double>(G) * G;
  if (num_pos > 0) {
    loss.rpn_reg /= num_pos;
    loss.roi_cls /= num_pos;
    loss.roi_reg /= num_pos;
  }
  loss.total = loss.rpn_cls + loss.rpn_reg + loss.roi_cls + loss.roi_reg;
  return loss;
}

// Exact gradient of detection_loss(forward(params, fmap), targets) with
// respect to params. When loss_out is given, the matching loss breakdown is
// filled in the same pass.
inline ParamVector loss_gradient(const DetectorArch& arch, const ParamVector& params,
                                 const FeatureMap& fmap, const CellTargets& targets,
                                 LossBreakdown* loss_out = nullptr) {
  validate(arch);
  check_params(arch, params);
  check_feature_map(arch, fmap);
  if (targets.grid != arch.grid)
    throw std::invalid_argument("targets grid does not match architecture");
  const int G = arch.grid;
  const int C = arch.channels;
  const int K = arch.num_classes;
  const int U = arch.trunk_dim();
  const int BO = arch.head_b_out();

  int num_pos = 0;
  for (uint8_t f : targets.positive) num_pos += f;
  const double inv_cells = 1.0 / (static_cast<double>(G) * G);
  const double inv_pos = num_pos > 0 ? 1.0 / num_pos : 0.0;

  ParamVector grad(params.size(), 0.0);
  const detail::ParamView w = detail::slice_params(arch, params.data());
  const detail::ParamViewMut gw = detail::slice_params_mut(arch, grad.data());

  std::vector<double> pre(U), trunk(U), out(9 + K);
  std::vector<double> softmax(K), gb(BO), gu(U);
  LossBreakdown loss;

  for (int y = 0; y < G; ++y) {
    for (int x = 0; x < G; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * G + x;
      const double* xin = fmap.cell(x, y);
      detail::forward_cell(arch, w, xin, pre.data(), trunk.data(), out.data());
      const bool pos = targets.positive[idx] != 0;
      const double o = out[0];
      const double p = sigmoid(o);
      loss.rpn_cls += bce_with_logit(o, pos ? 1.0 : 0.0);

      std::fill(gu.begin(), gu.end(), 0.0);
      double g_o = (p - (pos ? 1.0 : 0.0)) * inv_cells;

      double g_d[4] = {0, 0, 0, 0};
      if (pos) {
        const double* off = &targets.offsets[4 * idx];
        const double* z = out.data() + 5;
        double zmax = z[0];
        for (int k = 1; k < K; ++k) zmax = std::max(zmax, z[k]);
        double sum = 0.0;
        for (int k = 0; k < K; ++k) {
          softmax[k] = std::exp(z[k] - zmax);
          sum += softmax[k];
        }
        for (int k = 0; k < K; ++k) softmax[k] /= sum;
        const int tc = targets.class_id[idx];
        loss.roi_cls += std::log(sum) + zmax - z[tc];

        // output gradients of head B, then backprop through WB
        for (int k = 0; k < K; ++k) gb[k] = (softmax[k] - (k == tc ? 1.0 : 0.0)) * inv_pos;
        for (int k = 0; k < 4; ++k) {
          const double e = out[5 + K + k] - off[k];
          loss.roi_reg += smooth_l1(e);
          gb[K + k] = smooth_l1_grad(e) * inv_pos;
        }
        double g_p = 0.0;
        for (int j = 0; j < BO; ++j) {
          const double gj = gb[j];
          const double* row = w.WB + static_cast<std::size_t>(j) * (U + 1);
          double* grow = gw.WB + static_cast<std::size_t>(j) * (U + 1);
          for (int i = 0; i < U; ++i) {
            grow[i] += gj * trunk[i];
            gu[i] += gj * row[i];
          }
          grow[U] += gj * p;
          g_p += gj * row[U];
          gw.bB[j] += gj;
        }
        g_o += g_p * p * (1.0 - p);  // objectness feeds head B through sigmoid

        for (int k = 0; k < 4; ++k) {
          const double e = out[1 + k] - off[k];
          loss.rpn_reg += smooth_l1(e);
          g_d[k] = smooth_l1_grad(e) * inv_pos;
        }
      }

      // head A backward
      const double ga[5] = {g_o, g_d[0], g_d[1], g_d[2], g_d[3]};
      for (int j = 0; j < 5; ++j) {
        const double gj = ga[j];
        if (gj == 0.0) continue;
        const double* row = w.WA + static_cast<std::size_t>(j) * U;
        double* grow = gw.WA + static_cast<std::size_t>(j) * U;
        for (int i = 0; i < U; ++i) {
          grow[i] += gj * trunk[i];
          gu[i] += gj * row[i];
        }
        gw.bA[j] += gj;
      }

      if (arch.hidden > 0) {
        for (int h = 0; h < U; ++h) {
          if (pre[h] <= 0.0 || gu[h] == 0.0) continue;
          double* grow = gw.W0 + static_cast<std::size_t>(h) * C;
          for (int c = 0; c < C; ++c) grow[c] += gu[h] * xin[c];
          gw.b0[h] += gu[h];
        }
      }
    }
  }

  if (loss_out) {
    loss.rpn_cls *= inv_cells;
    if (num_pos > 0) {
      loss.rpn_reg *= inv_pos;
      loss.roi_cls *= inv_pos;
      loss.roi_reg *= inv_pos;
    }
    loss.total = loss.rpn_cls + loss.rpn_reg + loss.roi_cls + loss.roi_reg;
    *loss_out = loss;
  }
  return grad;
}

inline ParamVector sgd_step(const ParamVector& params, const ParamVector& grad, double lr) {
  if (params.size() != grad.size())
    throw std::invalid_argument("sgd_step: parameter and gradient lengths differ");
  if (lr < 0.0) throw std::invalid_argument("sgd_step: learning rate must be >= 0");
  ParamVector next(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) next[i] = params[i] - lr * grad[i];
  return next;
}

// Turns raw cell predictions into detections: cells whose objectness clears
// obj_thresh emit a box decoded from the refinement offsets against the cell
// anchor (clamped to the unit square), class = argmax of the class logits,
// confidence = sigmoid(o) * max softmax probability.
inline std::vector<Detection> decode(const CellPredictions& preds, double obj_thresh) {
  if (!(obj_thresh >= 0.0 && obj_thresh <= 1.0))
    throw std::invalid_argument("decode: obj_thresh must lie in [0,1]");
  const int G = preds.grid;
  const int K = preds.num_classes;
  std::vector<Detection> dets;
  for (int y = 0; y < G; ++y) {
    for (int x = 0; x < G; ++x) {
      const double* cell = preds.cell(x, y);
      const double p = sigmoid(cell[0]);
      if (p < obj_thresh) continue;
      const double* z = cell + 5;
      int best = 0;
      for (int k = 1; k < K; ++k)
        if (z[k] > z[best]) best = k;
      double sum = 0.0;
      for (int k = 0; k < K; ++k) sum += std::exp(z[k] - z[best]);
      const double conf = p * (1.0 / sum);
      const double cx = (x + 0.5 + cell[5 + K + 0]) / G;
      const double cy = (y + 0.5 + cell[5 + K + 1]) / G;
      const double w = std::exp(cell[5 + K + 2]) / G;
      const double h = std::exp(cell[5 + K + 3]) / G;
      const double x1 = std::clamp(cx - 0.5 * w, 0.0, 1.0);
      const double y1 = std::clamp(cy - 0.5 * h, 0.0, 1.0);
      const double x2 = std::clamp(cx + 0.5 * w, 0.0, 1.0);
      const double y2 = std::clamp(cy + 0.5 * h, 0.0, 1.0);
      if (x2 - x1 < 1e-9 || y2 - y1 < 1e-9) continue;  // fully clipped away
      dets.emplace_back(BoxRect(x1, y1, x2, y2), best, conf);
    }
  }
  return dets;
}

// ---------- checkpoint file ----------

struct Checkpoint {
  int format_version = 1;
  DetectorArch arch;
  ParamVector params;
  uint64_t rng_seed = 0;
  int trained_epochs = 0;
};

inline nlohmann::json checkpoint_to_json(const Checkpoint& ckpt) {
  return nlohmann::json{
      {"format_version", ckpt.format_version},
      {"arch",
       {{"G", ckpt.arch.grid},
        {"C", ckpt.arch.channels},
        {"K", ckpt.arch.num_classes},
        {"H", ckpt.arch.hidden}}},
      {"params", ckpt.params},
      {"rng_seed", ckpt.rng_seed},
      {"trained_epochs", ckpt.trained_epochs}};
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  Checkpoint ckpt;
  ckpt.format_version = j.at("format_version").get<int>();
  if (ckpt.format_version != 1)
    throw std::runtime_error("unsupported checkpoint format_version");
  const auto& a = j.at("arch");
  ckpt.arch.grid = a.at("G").get<int>();
  ckpt.arch.channels = a.at("C").get<int>();
  ckpt.arch.num_classes = a.at("K").get<int>();
  ckpt.arch.hidden = a.at("H").get<int>();
  validate(ckpt.arch);
  ckpt.params = j.at("params").get<ParamVector>();
  check_params(ckpt.arch, ckpt.params);
  ckpt.rng_seed = j.at("rng_seed").get<uint64_t>();
  ckpt.trained_epochs = j.at("trained_epochs").get<int>();
  return ckpt;
}

}  // namespace pets
