// Copyright 2026 The mmpipe Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Static parallel-configuration planning.
//
// The planner first finds the smallest profiling batch whose workload
// proportions round to a stable per-replica GPU allocation (repeated Bernoulli
// validation with batch doubling), then enumerates data/tensor/context/pipeline
// factorizations, balances each component's layers over its pipeline stages
// with a min-max dynamic program and scores the combined pipeline analytically.

#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmpipe/workload.h"

namespace mmpipe {

// Per-sample workload of every component, component-major per row.
class WorkloadTable {
 public:
  WorkloadTable() = default;
  WorkloadTable(std::size_t components, std::vector<double> row_major);

  // Workloads of every dataset sample with all components at TP = CP = 1.
  static WorkloadTable from_dataset(const LayerCostModel& costs, const ModelSpec& model,
                                    std::span<const Sample> dataset);
  // Two-component table (encoder, llm) from precomputed work items.
  static WorkloadTable from_items(std::span<const WorkItem> items);

  std::size_t size() const { return components_ == 0 ? 0 : values_.size() / components_; }
  std::size_t components() const { return components_; }
  double at(std::size_t row, std::size_t component) const {
    return values_[row * components_ + component];
  }

 private:
  std::size_t components_ = 0;
  std::vector<double> values_;
};

struct ProportionVector {
  std::vector<double> fractions;  // one per component, positive, sums to 1
};

struct GpuAllocation {
  std::vector<int> gpus;  // per replica, one entry per component

  int total() const;
  friend bool operator==(const GpuAllocation&, const GpuAllocation&) = default;
};

std::string to_string(const GpuAllocation& a);

struct ClusterSpec {
  int n_total = 1;
  double vram_per_gpu = 48e9;               // bytes
  double reshard_bandwidth = 25e9;          // bytes / second
  double bytes_per_token_activation = 4096;  // bytes
};

void validate(const ClusterSpec& cluster);

// Draws n rows with replacement and returns each component's share of the
// summed workload.
ProportionVector estimate_macroscopic_proportions(const WorkloadTable& table, int n,
                                                  std::mt19937_64& rng);
ProportionVector estimate_macroscopic_proportions(const WorkloadTable& table, int n,
                                                  std::uint64_t seed);

// Largest-remainder rounding of p * (n_total / dp) with at least one GPU per
// component. The result always sums to the per-replica budget.
GpuAllocation proportional_allocation(int n_total, int dp, const ProportionVector& p);

// ceil(ln(alpha) / ln(1 - p_error)).
int required_trials(double alpha, double p_error);

struct ProfilingOptions {
  double alpha = 0.05;
  double p_error = 0.05;
  int n0 = 1;
  int max_batch = 1 << 16;
  // Keep drawing all k validation batches after the first mismatch so the
  // log lists every allocation seen. Pass/fail is unchanged.
  bool full_trial_log = false;
};

struct TrialRound {
  int batch_size = 0;
  int trials_run = 0;
  bool passed = false;
  GpuAllocation reference;
  std::vector<GpuAllocation> allocations_seen;  // distinct, first-seen order
};

struct StableBatchResult {
  int b_min = 0;
  int trials = 0;  // k
  GpuAllocation reference;
  std::vector<TrialRound> log;
};

StableBatchResult find_min_stable_batch(const ProfilingOptions& options,
                                        const ClusterSpec& cluster, int dp,
                                        const WorkloadTable& table, std::uint64_t seed);

// Convergence-rate bound (6 * sigma / d)^2 for two-component models, where
// sigma is the population std of per-sample encoder ratios and d the distance
// of their mean to the nearest allocation breakpoint. Reported only.
struct TerminationBound {
  double mean_ratio = 0.0;
  double ratio_std = 0.0;
  double breakpoint_distance = 0.0;
  double n_star_bound = 0.0;
};
std::optional<TerminationBound> termination_bound(const WorkloadTable& table, int budget);

struct StagePartition {
  // Inclusive [first, last] positions into the component's layer list.
  std::vector<std::pair<int, int>> stages;
  std::vector<double> latencies;
  double bottleneck = 0.0;
};

// Min-max contiguous partition of `layer_costs` into `pp` stages.
StagePartition intra_module_balance(std::span<const double> layer_costs, int pp);

// Same, with per-layer costs taken from the cost model at `tokens` and scaled
// by `time_multiplier` (1 + backward/forward ratio when scoring iterations).
StagePartition intra_module_balance(std::span<const LayerSpec> layers, int pp, Degrees d,
                                    const LayerCostModel& costs, double tokens,
                                    double time_multiplier = 1.0);

// Sum of all stage latencies plus (K - 1) times the slowest stage, plus reshard.
double schedule_iteration_time(int k_microbatches, std::span<const StagePartition> partitions,
                               double reshard);

struct ComponentParallelism {
  int tp = 1;
  int cp = 1;
  int pp = 1;

  int gpus() const { return tp * cp * pp; }
  friend bool operator==(const ComponentParallelism&, const ComponentParallelism&) = default;
};

struct ParallelConfig {
  int dp = 1;
  std::vector<ComponentParallelism> components;
  GpuAllocation allocation;
  std::vector<StagePartition> partitions;
  int microbatches = 1;  // K
  double reshard = 0.0;  // ms per iteration
  double memory_per_rank = 0.0;
  double predicted_iteration_time = 0.0;  // ms
  double predicted_throughput = 0.0;      // samples / second

  int total_stages() const;
};

// Milliseconds spent moving boundary activations between adjacent components
// whose (tp, cp) differ: K * tokens * bytes_per_token / bandwidth per boundary.
double reshard_cost(const ParallelConfig& config, int k_microbatches,
                    double avg_boundary_tokens, const ClusterSpec& cluster);

struct MemoryModel {
  double optimizer_multiplier = 3.0;  // optimizer state bytes per parameter byte
  // Representative tokens per microbatch, one per component.
  std::vector<double> microbatch_tokens;
};

// Peak estimated bytes over all ranks of one replica under 1F1B in-flight
// counts: params / tp + optimizer state + activations of in-flight microbatches.
double memory_estimate(const ParallelConfig& config, const ModelSpec& model,
                       const MemoryModel& memory, const ClusterSpec& cluster);

// Per-rank breakdown in pipeline order, same model as memory_estimate.
std::vector<double> memory_per_rank(const ParallelConfig& config, const ModelSpec& model,
                                    const MemoryModel& memory, const ClusterSpec& cluster);

struct SearchOptions {
  int b_min = 1;
  int b_global = 1;
  int mu = 1;
  std::optional<int> dp;  // restrict the data-parallel degree
  double backward_multiplier = 2.0;
  double optimizer_multiplier = 3.0;
};

struct SearchResult {
  ParallelConfig best;
  ProportionVector proportions;
  std::vector<double> representative_tokens;  // per component, per microbatch
  int candidates_evaluated = 0;
  int candidates_skipped = 0;
};

SearchResult search_config(const SearchOptions& options, const ClusterSpec& cluster,
                           const ModelSpec& model, const LayerCostModel& costs,
                           std::span<const Sample> dataset, std::uint64_t seed);

}  // namespace mmpipe
