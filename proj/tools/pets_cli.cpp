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

// Command-line driver: pretrain | adapt | ablate | eval | selfcheck.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "pets/harness.hpp"

namespace fs = std::filesystem;

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write: " + path);
  out << text;
}

int run_pretrain(const std::string& config_path, const std::string& out_path) {
  const pets::ExperimentConfig cfg = pets::load_config_file(config_path);
  const pets::Checkpoint ckpt = pets::pretrain_source(cfg, &std::cerr);
  if (const fs::path parent = fs::path(out_path).parent_path(); !parent.empty())
    fs::create_directories(parent);
  pets::save_checkpoint_file(out_path, ckpt);

  const auto eval_scenes = pets::make_scenes(cfg, "eval_source_scene", cfg.data.num_eval_scenes);
  const pets::EvalReport report = pets::evaluate_params(
      cfg, ckpt.params, eval_scenes, pets::source_domain(), "eval_source_noise");
  std::cout << nlohmann::json{{"checkpoint", out_path},
                              {"source_eval", pets::eval_report_to_json(report)}}
                   .dump(2)
            << "\n";
  return 0;
}

int run_adapt(const std::string& config_path, const std::string& source_path,
              const std::string& out_dir) {
  const pets::ExperimentConfig cfg = pets::load_config_file(config_path);
  const pets::LoadedCheckpoint source = pets::load_checkpoint_file(source_path);
  fs::create_directories(out_dir);

  const pets::AdaptResult res = pets::adapt(cfg, source.checkpoint, &std::cerr);
  pets::export_curves(res.curves, (fs::path(out_dir) / "curves.csv").string());
  pets::save_checkpoint_file((fs::path(out_dir) / "checkpoint.json").string(),
                             res.final_checkpoint, &res.final_state);

  std::string pseudo;
  for (const auto& [image_id, label] : res.last_epoch_pseudo_labels)
    pseudo += pets::pseudo_label_record(image_id, label).dump() + "\n";
  write_text((fs::path(out_dir) / "pseudo_labels.jsonl").string(), pseudo);

  const auto eval_scenes = pets::make_scenes(cfg, "eval_target_scene", cfg.data.num_eval_scenes);
  const pets::DomainConfig domain = pets::target_domain(cfg);
  nlohmann::json roles;
  const struct {
    const char* name;
    const pets::ParamVector* params;
  } models[] = {{"student", &res.final_state.student},
                {"static_teacher", &res.final_state.static_teacher},
                {"dynamic_teacher", &res.final_state.dynamic_teacher}};
  for (const auto& m : models) {
    roles[m.name] = pets::eval_report_to_json(
        pets::evaluate_params(cfg, *m.params, eval_scenes, domain, "eval_target_noise"));
  }
  const nlohmann::json report{{"target_eval", roles}, {"warnings", res.warnings}};
  write_text((fs::path(out_dir) / "report.json").string(), report.dump(2) + "\n");
  std::cout << report.dump(2) << "\n";
  return 0;
}

int run_ablate(const std::string& config_path, const std::string& source_path,
               const std::string& out_dir) {
  const pets::ExperimentConfig cfg = pets::load_config_file(config_path);
  const pets::LoadedCheckpoint source = pets::load_checkpoint_file(source_path);
  fs::create_directories(out_dir);

  const pets::AblationTable table = pets::run_ablation(cfg, source.checkpoint, &std::cerr);
  std::string csv = "strategy,seed,final_map50\n";
  for (const auto& row : table.rows)
    csv += row.row + "," + std::to_string(row.seed) + "," + pets::format_double(row.final_map50) +
           "\n";
  write_text((fs::path(out_dir) / "ablation.csv").string(), csv);

  nlohmann::json medians = nlohmann::json::object();
  for (const auto& [row, m] : table.median_map50) medians[row] = m;
  write_text((fs::path(out_dir) / "ablation.json").string(),
             nlohmann::json{{"median_map50", medians}}.dump(2) + "\n");
  std::cout << nlohmann::json{{"median_map50", medians}}.dump(2) << "\n";
  return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& config_path) {
  const pets::ExperimentConfig cfg = pets::load_config_file(config_path);
  const pets::LoadedCheckpoint loaded = pets::load_checkpoint_file(ckpt_path);

  const auto src_scenes = pets::make_scenes(cfg, "eval_source_scene", cfg.data.num_eval_scenes);
  const auto tgt_scenes = pets::make_scenes(cfg, "eval_target_scene", cfg.data.num_eval_scenes);
  const pets::DomainConfig tgt_domain = pets::target_domain(cfg);

  auto both = [&](const pets::ParamVector& params) {
    return nlohmann::json{
        {"source", pets::eval_report_to_json(pets::evaluate_params(
                       cfg, params, src_scenes, pets::source_domain(), "eval_source_noise"))},
        {"target", pets::eval_report_to_json(pets::evaluate_params(
                       cfg, params, tgt_scenes, tgt_domain, "eval_target_noise"))}};
  };

  nlohmann::json report;
  if (loaded.state) {
    report["student"] = both(loaded.state->student);
    report["static_teacher"] = both(loaded.state->static_teacher);
    report["dynamic_teacher"] = both(loaded.state->dynamic_teacher);
  } else {
    report["model"] = both(loaded.checkpoint.params);
  }
  std::cout << report.dump(2) << "\n";
  return 0;
}

int run_selfcheck(uint64_t seed, bool inject_fault) {
  pets::SelfcheckOptions opts;
  opts.seed = seed;
  opts.corrupt_gradient = inject_fault;
  const auto results = pets::selfcheck(opts);
  int failures = 0;
  for (const auto& r : results) {
    std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << r.name << " (" << r.detail << ")\n";
    if (!r.passed) ++failures;
  }
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale periodic-exchange teacher-student adaptation lab"};
  app.require_subcommand(1);

  std::string config_path, out_path, source_path, out_dir, ckpt_path;
  uint64_t selfcheck_seed = 1;
  bool inject_fault = false;

  auto* pretrain = app.add_subcommand("pretrain", "Train the source detector on clean scenes");
  pretrain->add_option("--config", config_path, "experiment config (JSON)")->required();
  pretrain->add_option("--out", out_path, "output checkpoint path")->required();

  auto* adapt = app.add_subcommand("adapt", "Run source-free adaptation on target scenes");
  adapt->add_option("--config", config_path, "experiment config (JSON)")->required();
  adapt->add_option("--source", source_path, "source checkpoint")->required();
  adapt->add_option("--out-dir", out_dir, "output directory")->required();

  auto* ablate = app.add_subcommand("ablate", "Sweep exchange strategies and teacher modes");
  ablate->add_option("--config", config_path, "experiment config (JSON)")->required();
  ablate->add_option("--source", source_path, "source checkpoint")->required();
  ablate->add_option("--out-dir", out_dir, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on held-out scenes");
  eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  eval->add_option("--config", config_path, "experiment config (JSON)")->required();

  auto* selfcheck = app.add_subcommand("selfcheck", "Run the built-in oracle battery");
  selfcheck->add_option("--seed", selfcheck_seed, "seed for the randomized checks");
  selfcheck->add_flag("--inject-gradient-fault", inject_fault)->group("");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(pretrain)) return run_pretrain(config_path, out_path);
    if (app.got_subcommand(adapt)) return run_adapt(config_path, source_path, out_dir);
    if (app.got_subcommand(ablate)) return run_ablate(config_path, source_path, out_dir);
    if (app.got_subcommand(eval)) return run_eval(ckpt_path, config_path);
    if (app.got_subcommand(selfcheck)) return run_selfcheck(selfcheck_seed, inject_fault);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
