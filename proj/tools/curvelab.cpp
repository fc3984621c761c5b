// curvelab command-line driver: generate | train | eval | visualize | ablate.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "curvelab/harness.hpp"

namespace {

struct CommonArgs {
  std::string config;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonArgs* c) {
  cmd->add_option("--config", c->config, "run configuration file (TOML-style)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--set", c->sets, "override a value as section.key=value (repeatable)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"curvelab: query-based 3D lane detection on synthetic road scenes"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, viz_args, abl_args;
  std::string resume_path, checkpoint_path, scenes_dir, report_path, axis;
  int scene_index = 0;
  bool per_layer = false;

  CLI::App* gen = app.add_subcommand("generate", "write deterministic train/eval scene sets");
  add_common(gen, &gen_args);

  CLI::App* train = app.add_subcommand("train", "train a model on the generated train scenes");
  add_common(train, &train_args);
  train->add_option("--resume", resume_path, "checkpoint to resume from")
      ->check(CLI::ExistingFile);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint and write a JSON report");
  add_common(eval, &eval_args);
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint path (default: final)");
  eval->add_option("--scenes", scenes_dir, "scene dir, or 'train'/'eval' for the generated sets");
  eval->add_option("--report", report_path, "report output path");

  CLI::App* viz = app.add_subcommand("visualize", "write overlay and BEV images for one scene");
  add_common(viz, &viz_args);
  viz->add_option("--checkpoint", checkpoint_path, "checkpoint path (default: final)");
  viz->add_option("--scenes", scenes_dir, "scene dir, or 'train'/'eval' for the generated sets");
  viz->add_option("--scene", scene_index, "scene index");
  viz->add_flag("--per-layer", per_layer, "also write one overlay per decoder layer");

  CLI::App* abl = app.add_subcommand("ablate", "train and score a sweep along one axis");
  add_common(abl, &abl_args);
  abl->add_option("--axis", axis, "decoder-layers | sampling | head | seg")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      curvelab::cmd_generate(curvelab::load_run_config(gen_args.config, gen_args.sets));
    } else if (train->parsed()) {
      curvelab::cmd_train(curvelab::load_run_config(train_args.config, train_args.sets),
                          resume_path);
    } else if (eval->parsed()) {
      curvelab::cmd_eval(curvelab::load_run_config(eval_args.config, eval_args.sets),
                         checkpoint_path, scenes_dir, report_path);
    } else if (viz->parsed()) {
      curvelab::cmd_visualize(curvelab::load_run_config(viz_args.config, viz_args.sets),
                              scene_index, per_layer, checkpoint_path, scenes_dir);
    } else if (abl->parsed()) {
      curvelab::cmd_ablate(curvelab::load_run_config(abl_args.config, abl_args.sets), axis);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
