// Copyright 2026 The mmpipe Authors.
// SPDX-License-Identifier: Apache-2.0
//
// mmpipe command line: gen-dataset, fit, plan, run, compare.
// Exit codes: 0 ok, 1 invalid input, 2 infeasible, 3 internal invariant.

#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mmpipe/error.h"
#include "mmpipe/experiment.h"

namespace {

int exit_code(mmpipe::ErrorKind kind) {
  switch (kind) {
    case mmpipe::ErrorKind::kInvalidInput:
      return 1;
    case mmpipe::ErrorKind::kInfeasible:
      return 2;
    case mmpipe::ErrorKind::kInternalInvariant:
      return 3;
  }
  return 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pipeline planning and scheduling for multimodal model training"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  app.add_option("--config", config_path, "experiment config (JSON)");
  app.add_option("--seed", seed, "override the config seed");
  app.add_option("--out", out_dir, "output directory");

  auto* gen = app.add_subcommand("gen-dataset", "write a synthetic dataset as JSONL");
  auto* fit = app.add_subcommand("fit", "fit per-layer cost curves from measurements");
  std::string measurements;
  fit->add_option("--input", measurements, "measurements JSONL")->required();
  auto* plan = app.add_subcommand("plan", "profile the dataset and search a configuration");
  auto* run = app.add_subcommand("run", "plan, then simulate all schedules");
  auto* compare = app.add_subcommand("compare", "compare metrics.json files");
  std::vector<std::string> inputs;
  compare->add_option("files", inputs, "metrics.json files, the first is the reference")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    auto load = [&] {
      if (config_path.empty()) mmpipe::throw_invalid("--config is required");
      mmpipe::ExperimentConfig cfg = mmpipe::load_experiment_config(config_path);
      if (seed) {
        cfg.seed = *seed;
        if (cfg.synthetic) cfg.synthetic->seed = *seed;
      }
      return cfg;
    };
    if (gen->parsed()) {
      mmpipe::cmd_gen_dataset(load(), out_dir);
    } else if (fit->parsed()) {
      mmpipe::cmd_fit(measurements, out_dir);
    } else if (plan->parsed()) {
      mmpipe::cmd_plan(load(), out_dir);
    } else if (run->parsed()) {
      mmpipe::cmd_run(load(), out_dir);
    } else if (compare->parsed()) {
      mmpipe::cmd_compare(inputs, out_dir);
    }
  } catch (const mmpipe::Error& e) {
    std::cerr << "mmpipe: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "mmpipe: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
