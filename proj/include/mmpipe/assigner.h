// Copyright 2026 The mmpipe Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Hierarchical microbatch assignment.
//
// Samples are first spread over data-parallel replicas, then each replica's
// minibatch is split into encoder-balanced microbatches (LPT over a
// coarse/fine stratification by LLM workload). Finally the LLM work is
// balanced by deferring whole samples' LLM computation from overloaded
// microbatches to an underloaded partner that runs immediately after it. The
// pairing minimizes the largest post-deferral LLM workload.

#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mmpipe/workload.h"

namespace mmpipe {

struct Minibatch {
  int replica_id = 0;
  std::vector<WorkItem> samples;
};

// Sorts by encoder workload (descending, ties by id) and hands each sample to
// the replica with the least accumulated LLM workload (ties: lowest id).
// Each minibatch keeps its samples in input order.
std::vector<Minibatch> assign_to_replicas(std::span<const WorkItem> samples, int dp);

// min(K, floor(sum w_enc / max w_enc)), at least 1.
int effective_microbatch_count(std::span<const WorkItem> samples, int k_requested);

struct Microbatch {
  int index = 0;
  std::vector<WorkItem> samples;   // encoder-side membership
  std::vector<SampleId> fine_ids;  // members from the fine-grained stratum
  double w_encoder_total = 0.0;
  double w_llm_resident = 0.0;     // LLM work of members (before deferral)

  bool is_fine(SampleId id) const;
};

// Encoder-side microbatches. Samples split at the median LLM workload into a
// coarse (heavy) and fine (light) stratum; each stratum is sorted by encoder
// workload and placed, coarse first, on the least encoder-loaded microbatch.
std::vector<Microbatch> stratified_assign(std::span<const WorkItem> samples, int k_eff);

struct SubsetChoice {
  std::vector<std::size_t> chosen;  // indices into the weight list, ascending
  long long sum_quanta = 0;
  double residual_quanta = 0.0;     // |target/resolution - sum_quanta|
};

// Subset whose quantized sum is closest to `target`. Weights are rounded to
// multiples of `resolution`. Ties: fewest items, then lexicographically
// smallest index list. O(n * sum of quantized weights).
SubsetChoice closest_subset_sum(std::span<const double> weights, double target,
                                double resolution);

struct DeferralChoice {
  std::vector<SampleId> sample_ids;  // ascending
  double deferred = 0.0;             // exact LLM workload moved
  double residual_quanta = 0.0;
};

// Samples of `overloaded` whose LLM work best approximates half the LLM gap.
// Candidates are the fine-stratum members when there are any.
DeferralChoice optimal_deferral_set(const Microbatch& overloaded, const Microbatch& underloaded,
                                    double resolution);

// max(w_i - w_deferred, w_j + w_deferred).
double bottleneck_cost(double w_llm_i, double w_llm_j, double w_deferred);

struct MatchedPair {
  int overloaded = 0;   // row
  int underloaded = 0;  // column
  bool defers = false;  // critical pair that applies its deferral set
};

struct MatchResult {
  double t_star = 0.0;
  std::vector<MatchedPair> pairing;  // ordered by row
};

// True when every row with standalone[i] > threshold can be matched to a
// distinct column with cost[i][j] <= threshold.
bool bottleneck_feasible(const std::vector<std::vector<double>>& cost,
                         std::span<const double> standalone, double threshold);

// Smallest feasible threshold among cost and standalone values, found by
// binary search with augmenting-path matching on the critical rows. Rows
// that fit without deferral go to the leftover columns, last column first.
// Requires rows <= columns.
MatchResult bottleneck_match(const std::vector<std::vector<double>>& cost,
                             std::span<const double> standalone);

struct DeferralPlan {
  std::vector<MatchedPair> pairing;                  // microbatch indices
  std::map<int, std::vector<SampleId>> deferred;     // overloaded index -> ids
  std::vector<int> order;                            // execution order
  double t_star = 0.0;
};

struct AssignerOptions {
  double resolution_fraction = 1.0 / 256.0;  // of the overloaded LLM workload
  bool enable_deferral = true;
  // Also apply the optimal deferral set on pairs that already fit under T*.
  bool defer_noncritical = false;
};

struct MicrobatchPlan {
  int k_eff = 1;
  std::vector<Microbatch> encoder;     // indexed by Microbatch::index
  DeferralPlan deferral;
  std::vector<double> llm_resident;    // post-deferral LLM work per microbatch
  std::vector<int> partner;            // overloaded -> partner index, else -1
};

MicrobatchPlan build_plan(const Minibatch& minibatch, int k_requested,
                          const AssignerOptions& options = {});

// JSON for the plan file consumed by the simulator.
std::string plan_to_json(const MicrobatchPlan& plan);
MicrobatchPlan plan_from_json(const std::string& text, std::span<const WorkItem> samples);

}  // namespace mmpipe
