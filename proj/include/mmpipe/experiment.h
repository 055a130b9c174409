// Copyright 2026 The mmpipe Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration and the commands behind the CLI.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmpipe/assigner.h"
#include "mmpipe/planner.h"
#include "mmpipe/simulator.h"
#include "mmpipe/workload.h"

namespace mmpipe {

struct ReferenceCostSpec {
  ReferenceCostParams params;
  std::vector<Degrees> degrees;  // empty: every power-of-two tp*cp <= n_total
};

struct PlannerParams {
  double alpha = 0.05;
  double p_error = 0.05;
  int n0 = 1;
  int max_batch = 1 << 16;
  int mu = 4;
  int b_global = 512;
  std::optional<int> dp;
  std::optional<int> b_min;  // skip profiling and use this batch size
};

struct RunParams {
  int iterations = 100;
  std::vector<std::string> schedules{"1f1b", "disttrain", "dip", "entrain"};
  std::optional<int> k;  // default b_global / (dp * mu)
  bool deferral = true;
  bool defer_noncritical = false;
  double resolution_fraction = 1.0 / 256.0;
  int inflight_cap = 0;
  double bwd_multiplier = 2.0;
  double hop_latency = 0.0;
  int trace_iterations = 1;  // iterations whose replica-0 traces are written
};

struct ExperimentConfig {
  std::optional<std::string> dataset_path;
  std::optional<DatasetSpec> synthetic;
  std::optional<std::string> cost_model_path;
  ReferenceCostSpec reference;
  ModelSpec model;
  ClusterSpec cluster;
  PlannerParams planner;
  RunParams run;
  // Skip the configuration search: dp and per-component (tp, cp, pp).
  std::optional<int> fixed_dp;
  std::vector<ComponentParallelism> fixed_components;
  std::uint64_t seed = 0;
};

// Relative paths inside the config resolve against `base_dir`.
ExperimentConfig parse_experiment_config(const std::string& json_text,
                                         const std::string& base_dir = ".");
ExperimentConfig load_experiment_config(const std::string& path);

std::vector<Sample> load_dataset(const ExperimentConfig& config);
LayerCostModel load_cost_model(const ExperimentConfig& config);

struct PlanReport {
  std::optional<StableBatchResult> profiling;  // absent when b_min was given
  int b_min = 0;
  std::optional<TerminationBound> bound;
  SearchResult search;
  std::vector<std::string> warnings;
};

PlanReport plan_experiment(const ExperimentConfig& config, const std::vector<Sample>& dataset,
                           const LayerCostModel& costs);

// Scores a user-fixed configuration the way the search would.
ParallelConfig evaluate_fixed_config(const ExperimentConfig& config,
                                     const std::vector<Sample>& dataset,
                                     const LayerCostModel& costs);

struct ScheduleSummary {
  std::string schedule;
  bool approximate = false;  // baseline whose internals are approximated
  std::vector<double> iteration_times;
  std::vector<double> bubble_fractions;
  double mean_iteration_time = 0.0;
  double throughput = 0.0;  // samples / second
  double mean_bubble = 0.0;
  double encoder_std = 0.0;  // mean over (iteration, replica)
  double llm_std = 0.0;
  double encoder_std_pooled = 0.0;  // over all microbatches of all iterations
  double llm_std_pooled = 0.0;
  double max_peak_memory = 0.0;
  double mean_k = 0.0;
  int violations = 0;
};

struct TraceRecord {
  int iteration = 0;
  std::string schedule;
  ScheduleTrace trace;
  ExecutionPlan plan;
};

struct RunReport {
  ParallelConfig config;
  int k = 0;
  int global_batch = 0;
  std::vector<ScheduleSummary> schedules;
  std::vector<TraceRecord> traces;
  std::vector<MicrobatchPlan> first_plans;  // iteration 0, one per replica
  std::vector<std::string> violation_samples;
};

RunReport run_experiment(const ExperimentConfig& config, const std::vector<Sample>& dataset,
                         const LayerCostModel& costs, const ParallelConfig& parallel);

std::string plan_report_to_json(const PlanReport& report);
std::string run_report_to_json(const RunReport& report);

// CLI commands. Outputs go to `out_dir`, which is created when missing.
void cmd_gen_dataset(const ExperimentConfig& config, const std::string& out_dir);
void cmd_fit(const std::string& measurements_path, const std::string& out_dir);
void cmd_plan(const ExperimentConfig& config, const std::string& out_dir);
void cmd_run(const ExperimentConfig& config, const std::string& out_dir);
void cmd_compare(const std::vector<std::string>& metrics_paths, const std::string& out_dir);

}  // namespace mmpipe
