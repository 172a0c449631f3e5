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

// Control laws of the periodic-exchange trainer: EMA update of the dynamic
// teacher, weight flow between student and static teacher at period
// boundaries, and the warm-up learning-rate ramp.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

#include "pets/model.hpp"

namespace pets {

enum class Phase { Warmup, Adaptation };

inline std::string to_string(Phase p) { return p == Phase::Warmup ? "warmup" : "adaptation"; }

inline Phase phase_from_string(const std::string& s) {
  if (s == "warmup") return Phase::Warmup;
  if (s == "adaptation") return Phase::Adaptation;
  throw std::invalid_argument("unknown phase: " + s);
}

// The three model parameter vectors plus period/iteration counters.
struct TrainerState {
  ParamVector student;
  ParamVector static_teacher;
  ParamVector dynamic_teacher;
  int64_t period = 0;
  int64_t iteration = 0;
  Phase phase = Phase::Warmup;
};

inline void check_state(const TrainerState& state) {
  if (state.student.size() != state.static_teacher.size() ||
      state.student.size() != state.dynamic_teacher.size())
    throw std::invalid_argument("TrainerState: model vectors must have identical length");
}

// Weight-flow strategies applied at period boundaries. Swap is the default
// double-direction exchange; the single-direction variants copy one model's
// weights onto another while the source keeps its own.
enum class FlowStrategy { Baseline, StudentToStatic, DynamicToStudent, DynamicToStatic, Swap };

inline FlowStrategy flow_strategy_from_string(const std::string& s) {
  if (s == "baseline") return FlowStrategy::Baseline;
  if (s == "s_to_st") return FlowStrategy::StudentToStatic;
  if (s == "dt_to_s") return FlowStrategy::DynamicToStudent;
  if (s == "dt_to_st") return FlowStrategy::DynamicToStatic;
  if (s == "swap") return FlowStrategy::Swap;
  throw std::invalid_argument("unknown flow strategy: " + s);
}

inline std::string to_string(FlowStrategy s) {
  switch (s) {
    case FlowStrategy::Baseline: return "baseline";
    case FlowStrategy::StudentToStatic: return "s_to_st";
    case FlowStrategy::DynamicToStudent: return "dt_to_s";
    case FlowStrategy::DynamicToStatic: return "dt_to_st";
    case FlowStrategy::Swap: return "swap";
  }
  throw std::logic_error("unreachable");
}

// dynamic_teacher <- alpha * dynamic_teacher + (1 - alpha) * student.
inline void ema_update(TrainerState& state, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw std::invalid_argument("ema_update: alpha must lie in [0,1]");
  check_state(state);
  const double one_minus = 1.0 - alpha;
  for (std::size_t i = 0; i < state.dynamic_teacher.size(); ++i)
    state.dynamic_teacher[i] = alpha * state.dynamic_teacher[i] + one_minus * state.student[i];
}

// Applies the weight flow at a period boundary and advances the period
// counter. Swap exchanges the student and static-teacher vectors atomically.
inline void apply_flow(TrainerState& state, FlowStrategy strategy) {
  check_state(state);
  switch (strategy) {
    case FlowStrategy::Baseline:
      break;
    case FlowStrategy::StudentToStatic:
      state.static_teacher = state.student;
      break;
    case FlowStrategy::DynamicToStudent:
      state.student = state.dynamic_teacher;
      break;
    case FlowStrategy::DynamicToStatic:
      state.static_teacher = state.dynamic_teacher;
      break;
    case FlowStrategy::Swap:
      std::swap(state.student, state.static_teacher);
      break;
  }
  ++state.period;
}

// Linear ramp from 0 to base_lr over warmup_iters, constant afterward.
inline double warmup_lr(int64_t iter, int64_t warmup_iters, double base_lr) {
  if (warmup_iters < 1) throw std::invalid_argument("warmup_lr: warmup_iters must be >= 1");
  if (iter < 0) throw std::invalid_argument("warmup_lr: iter must be >= 0");
  const double f = std::min(1.0, static_cast<double>(iter) / static_cast<double>(warmup_iters));
  return f * base_lr;
}

// No exchange during the warm-up epochs, then a boundary at every epoch.
inline bool at_period_boundary(int epoch, int warmup_epochs) {
  if (epoch < 0) throw std::invalid_argument("at_period_boundary: epoch must be >= 0");
  if (warmup_epochs < 0)
    throw std::invalid_argument("at_period_boundary: warmup_epochs must be >= 0");
  return epoch >= warmup_epochs;
}

}  // namespace pets
