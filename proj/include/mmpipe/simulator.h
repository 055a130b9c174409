// Copyright 2026 The mmpipe Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic discrete-event simulation of one pipeline-parallel replica.
//
// Every schedule is lowered to a static per-rank program of operations with
// explicit data dependencies. An operation starts once its rank is free and
// all of its dependencies have finished (plus the hop latency when the
// dependency ran on another rank). Times are milliseconds.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "mmpipe/assigner.h"
#include "mmpipe/workload.h"

namespace mmpipe {

enum class Phase { kEncFwd, kLlmFwd, kLlmBwd, kEncBwd };
enum class Subset { kFull, kDeferredPart, kNonDeferredPart };

std::string to_string(Phase p);
std::string to_string(Subset s);
Phase parse_phase(const std::string& text);
Subset parse_subset(const std::string& text);

struct StageModel {
  int stage_id = 0;
  std::string component_id;
  ComponentKind kind = ComponentKind::kLlm;
  int rank = 0;
  double share = 1.0;           // fraction of the component's workload run here
  double bwd_multiplier = 2.0;  // backward time / forward time

  bool is_encoder_stage() const { return kind == ComponentKind::kEncoder; }
  double fwd_cost(double workload) const { return share * workload; }
  double bwd_cost(double workload) const { return bwd_multiplier * share * workload; }
};

struct PipelineModel {
  std::vector<StageModel> stages;  // data-flow order, encoder stages first
  double hop_latency = 0.0;        // per cross-rank dependency
  double bytes_per_token = 4096.0;
  TokenMapping mapping;

  int rank_count() const;
  int encoder_stage_count() const;
  int llm_stage_count() const;
};

// One stage per rank; stage shares proportional to the given stage latencies.
PipelineModel make_pipeline(const std::vector<double>& encoder_stage_latencies,
                            const std::vector<double>& llm_stage_latencies,
                            double bwd_multiplier = 2.0);

// `ranks` ranks, each hosting an equal encoder slice and an equal LLM slice.
PipelineModel make_colocated_pipeline(int ranks, double bwd_multiplier = 2.0);

struct ExecMicrobatch {
  int index = 0;
  std::vector<WorkItem> encoder_samples;
  std::vector<WorkItem> llm_samples;     // LLM work resident here after deferral
  std::vector<SampleId> deferred_out;    // encoder members whose LLM runs at partner
  int partner = -1;

  double encoder_workload() const;
  double llm_workload() const;
};

struct ExecutionPlan {
  std::vector<ExecMicrobatch> microbatches;  // indexed by ExecMicrobatch::index
  std::vector<int> order;                    // injection order

  bool has_deferral() const;
};

// K chunks of (almost) equal sample count in input order.
ExecutionPlan static_split(std::span<const WorkItem> samples, int k);
ExecutionPlan to_execution_plan(const MicrobatchPlan& plan);
// Sorted by total workload, then alternately heaviest and lightest remaining.
ExecutionPlan heavy_light_order(const ExecutionPlan& plan);

struct ScheduleEvent {
  int rank = 0;
  int stage = 0;
  int microbatch = 0;
  Subset subset = Subset::kFull;
  Phase phase = Phase::kEncFwd;
  double start = 0.0;
  double end = 0.0;
  std::vector<SampleId> samples;
};

struct MemoryPoint {
  double time = 0.0;
  double bytes = 0.0;  // resident activation bytes from `time` on
};

// Encoder output of deferred samples held on the first LLM rank.
struct DeferredBuffer {
  int rank = 0;
  int microbatch = 0;
  int partner = 0;
  double start = 0.0;
  double end = 0.0;
  double bytes = 0.0;
};

struct StageInfo {
  int stage_id = 0;
  ComponentKind kind = ComponentKind::kLlm;
  int rank = 0;
};

struct ScheduleTrace {
  std::string schedule;
  std::vector<StageInfo> stages;
  int ranks = 0;
  std::vector<ScheduleEvent> events;  // in execution order
  double iteration_time = 0.0;
  double bubble_fraction = 0.0;
  std::vector<std::vector<MemoryPoint>> memory;  // per rank
  std::vector<double> peak_memory;               // per rank
  std::vector<DeferredBuffer> deferred_buffers;
  std::vector<double> encoder_fwd_times;  // per microbatch index, summed over stages
  std::vector<double> llm_fwd_times;
};

// Classic one-forward-one-backward: stage s warms up with depth - s forwards.
ScheduleTrace simulate_1f1b(const PipelineModel& pipeline, const ExecutionPlan& plan);

// 1F1B with split encoder backward for deferred samples. Encoder stage s
// warms up with inflight_cap - s forwards (0 selects depth + 2); LLM stages
// keep the 1F1B warm-up. Throws kInfeasible when the cap is below the
// pipeline depth.
ScheduleTrace simulate_entrain(const PipelineModel& pipeline, const ExecutionPlan& plan,
                               int inflight_cap = 0);

// 1F1B over heavy_light_order(plan).
ScheduleTrace simulate_disttrain(const PipelineModel& pipeline, const ExecutionPlan& plan);

// All encoder forwards, then LLM 1F1B, then encoder backwards, on ranks that
// each host one encoder and one LLM stage.
ScheduleTrace simulate_dip(const PipelineModel& colocated, const ExecutionPlan& plan);

struct TraceMetrics {
  double iteration_time = 0.0;
  double bubble_fraction = 0.0;
  double encoder_fwd_std = 0.0;
  double llm_fwd_std = 0.0;
  std::vector<double> peak_memory;
  double max_peak_memory = 0.0;
};

TraceMetrics metrics(const ScheduleTrace& trace);
double population_std(const std::vector<double>& values);

// Empty when the trace is consistent with the plan; otherwise one line per
// violated property naming the offending events.
std::vector<std::string> validate_trace(const ScheduleTrace& trace, const ExecutionPlan& plan);

// Violations of the single-buffer rule: per rank at most one deferred buffer
// alive at a time, and no other first-LLM-stage forward starting while one is.
std::vector<std::string> check_deferred_residency(const ScheduleTrace& trace);

// CSV with header rank,microbatch,subset,phase,start,end.
void write_trace_csv(std::ostream& out, const ScheduleTrace& trace);
std::vector<ScheduleEvent> read_trace_csv(std::istream& in);

std::string metrics_to_json(const TraceMetrics& m);

}  // namespace mmpipe
