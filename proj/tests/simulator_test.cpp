// Copyright 2026 The mmpipe Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "mmpipe/assigner.h"
#include "mmpipe/planner.h"
#include "mmpipe/simulator.h"
#include "oracles.h"
#include "test_util.h"

namespace mmpipe {
namespace {

WorkItem item(SampleId id, double enc, double llm, std::int64_t enc_tokens = 1,
              std::int64_t text_tokens = 0) {
  return {{id, enc_tokens, text_tokens}, {enc, llm}};
}

// One sample per microbatch.
ExecutionPlan one_per_mb(const std::vector<WorkItem>& items) {
  return static_split(items, static_cast<int>(items.size()));
}

const ScheduleEvent& find_event(const ScheduleTrace& t, int stage, int mb, Phase ph,
                                Subset sub = Subset::kFull) {
  for (const auto& e : t.events) {
    if (e.stage == stage && e.microbatch == mb && e.phase == ph && e.subset == sub) return e;
  }
  ADD_FAILURE() << "event not found";
  static ScheduleEvent none;
  return none;
}

TEST(Pipeline, SharesFollowLatencies) {
  PipelineModel p = make_pipeline({1.0, 3.0}, {2.0}, 2.5);
  ASSERT_EQ(p.stages.size(), 3u);
  EXPECT_DOUBLE_EQ(p.stages[0].share, 0.25);
  EXPECT_DOUBLE_EQ(p.stages[1].share, 0.75);
  EXPECT_DOUBLE_EQ(p.stages[2].share, 1.0);
  EXPECT_DOUBLE_EQ(p.stages[1].bwd_cost(4.0), 2.5 * 3.0);
  EXPECT_EQ(p.rank_count(), 3);
  EXPECT_EQ(p.encoder_stage_count(), 2);
  PipelineModel c = make_colocated_pipeline(3);
  EXPECT_EQ(c.rank_count(), 3);
  EXPECT_EQ(c.stages[4].rank, 1);
}

TEST(StaticSplit, ChunksInInputOrder) {
  std::vector<WorkItem> v;
  for (int i = 0; i < 10; ++i) v.push_back(item(i, 1, 1));
  ExecutionPlan p = static_split(v, 3);
  ASSERT_EQ(p.microbatches.size(), 3u);
  EXPECT_EQ(p.microbatches[0].encoder_samples.size(), 4u);
  EXPECT_EQ(p.microbatches[2].encoder_samples.size(), 3u);
  EXPECT_EQ(p.microbatches[1].encoder_samples.front().sample.id, 4);
  EXPECT_EQ(error_kind([&] { static_split(v, 11); }), ErrorKind::kInvalidInput);
}

TEST(HeavyLightOrder, AlternatesExtremes) {
  ExecutionPlan p = one_per_mb({item(0, 4, 1), item(1, 0.5, 0.5), item(2, 1, 2), item(3, 2, 2)});
  EXPECT_EQ(heavy_light_order(p).order, (std::vector<int>{0, 1, 3, 2}));
}

TEST(OneFOneB, TwoStageHandTrace) {
  PipelineModel pipe = make_pipeline({1.0}, {1.0});
  pipe.bytes_per_token = 1.0;
  ExecutionPlan plan = one_per_mb({item(0, 1, 2, 10, 0), item(1, 2, 1, 20, 5)});
  ScheduleTrace t = simulate_1f1b(pipe, plan);
  EXPECT_DOUBLE_EQ(t.iteration_time, 14.0);
  const ScheduleEvent& f1 = find_event(t, 1, 1, Phase::kLlmFwd);
  EXPECT_DOUBLE_EQ(f1.start, 7.0);
  EXPECT_DOUBLE_EQ(f1.end, 8.0);
  EXPECT_DOUBLE_EQ(find_event(t, 0, 0, Phase::kEncBwd).start, 7.0);
  EXPECT_DOUBLE_EQ(find_event(t, 0, 1, Phase::kEncBwd).end, 14.0);
  EXPECT_NEAR(t.bubble_fraction, 1.0 - 18.0 / 28.0, 1e-15);
  EXPECT_EQ(t.encoder_fwd_times, (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(t.llm_fwd_times, (std::vector<double>{2.0, 1.0}));
  // Rank 0 holds both encoder activations; rank 1 frees mb 0 before mb 1.
  EXPECT_DOUBLE_EQ(t.peak_memory[0], 30.0);
  EXPECT_DOUBLE_EQ(t.peak_memory[1], 25.0);
  EXPECT_TRUE(validate_trace(t, plan).empty());
}

TEST(OneFOneB, HopLatencyOnEveryCrossRankEdge) {
  PipelineModel pipe = make_pipeline({1.0}, {1.0});
  pipe.hop_latency = 0.5;
  ScheduleTrace t = simulate_1f1b(pipe, one_per_mb({item(0, 1, 1)}));
  EXPECT_DOUBLE_EQ(t.iteration_time, 1 + 0.5 + 1 + 2 + 0.5 + 2);
}

TEST(OneFOneB, UniformStagesMatchClosedFormAndIterationModel) {
  for (int enc_stages = 1; enc_stages <= 3; ++enc_stages) {
    for (int llm_stages = 1; llm_stages <= 4; ++llm_stages) {
      for (int k = 1; k <= 9; ++k) {
        std::vector<double> el(enc_stages, 1.5), ll(llm_stages, 1.5);
        PipelineModel pipe = make_pipeline(el, ll);
        std::vector<WorkItem> v;
        for (int i = 0; i < k; ++i) v.push_back(item(i, 0.5 * enc_stages, 0.5 * llm_stages));
        ScheduleTrace t = simulate_1f1b(pipe, one_per_mb(v));
        const int s = enc_stages + llm_stages;
        EXPECT_NEAR(t.iteration_time, oracle::uniform_1f1b_time(s, k, 0.5, 1.0), 1e-12);
        StagePartition a{{}, el, 1.5}, b{{}, ll, 1.5};
        std::vector<StagePartition> parts = {a, b};
        EXPECT_NEAR(t.iteration_time, schedule_iteration_time(k, parts, 0.0), 1e-9 * t.iteration_time);
      }
    }
  }
}

TEST(Entrain, DegeneratesToOneFOneB) {
  PipelineModel pipe = make_pipeline({1.0, 2.0}, {1.0, 1.0, 3.0});
  auto items = oracle::random_items(4, 30);
  ExecutionPlan plan = static_split(items, 6);
  ScheduleTrace a = simulate_1f1b(pipe, plan);
  ScheduleTrace b = simulate_entrain(pipe, plan, static_cast<int>(pipe.stages.size()));
  ASSERT_EQ(a.events.size(), b.events.size());
  for (std::size_t i = 0; i < a.events.size(); ++i) {
    EXPECT_EQ(a.events[i].start, b.events[i].start);
    EXPECT_EQ(a.events[i].end, b.events[i].end);
    EXPECT_EQ(a.events[i].microbatch, b.events[i].microbatch);
  }
  EXPECT_EQ(a.iteration_time, b.iteration_time);
  EXPECT_EQ(error_kind([&] { simulate_entrain(pipe, plan, 4); }), ErrorKind::kInfeasible);
}

TEST(Entrain, SplitBackwardForDeferredSamples) {
  int with_deferral = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Minibatch mb{0, oracle::random_items(seed + 500, 48, 1.2)};
    MicrobatchPlan mp = build_plan(mb, 8);
    ExecutionPlan plan = to_execution_plan(mp);
    PipelineModel pipe = make_pipeline({1.0, 1.0}, {1.0, 1.0, 1.0});
    ScheduleTrace t = simulate_entrain(pipe, plan);
    EXPECT_TRUE(validate_trace(t, plan).empty()) << seed;
    EXPECT_TRUE(check_deferred_residency(t).empty()) << seed;
    EXPECT_EQ(t.deferred_buffers.size(), mp.deferral.deferred.size());
    for (const auto& [idx, ids] : mp.deferral.deferred) {
      ++with_deferral;
      const ScheduleEvent& d = find_event(t, 1, idx, Phase::kEncBwd, Subset::kDeferredPart);
      EXPECT_EQ(d.samples.size(), ids.size());
      const ScheduleEvent& partner_bwd = find_event(t, 2, mp.partner[idx], Phase::kLlmBwd);
      EXPECT_GE(d.start, partner_bwd.end);
      // The partner's LLM forward consumes the deferred encoder output.
      const ScheduleEvent& enc_out = find_event(t, 1, idx, Phase::kEncFwd);
      EXPECT_GE(find_event(t, 2, mp.partner[idx], Phase::kLlmFwd).start, enc_out.end);
    }
    // LLM time per microbatch reflects the post-deferral residency.
    for (int i = 0; i < mp.k_eff; ++i) {
      EXPECT_NEAR(t.llm_fwd_times[i], mp.llm_resident[i], 1e-9 * mp.deferral.t_star);
    }
  }
  EXPECT_GT(with_deferral, 0);
}

TEST(DisttrainSchedule, IsOneFOneBOverReorderedPlan) {
  PipelineModel pipe = make_pipeline({1.0}, {1.0, 1.0});
  ExecutionPlan plan = static_split(oracle::random_items(2, 24), 6);
  ScheduleTrace a = simulate_disttrain(pipe, plan);
  ScheduleTrace b = simulate_1f1b(pipe, heavy_light_order(plan));
  EXPECT_EQ(a.iteration_time, b.iteration_time);
  EXPECT_TRUE(validate_trace(a, plan).empty());
}

TEST(Dip, SingleMicrobatchSerializes) {
  PipelineModel c = make_colocated_pipeline(3, 2.0);
  ScheduleTrace t = simulate_dip(c, one_per_mb({item(0, 3.0, 6.0)}));
  // Every phase of the single microbatch runs back to back.
  EXPECT_DOUBLE_EQ(t.iteration_time, (3.0 + 6.0) * 3.0);
  EXPECT_TRUE(validate_trace(t, one_per_mb({item(0, 3.0, 6.0)})).empty());
  EXPECT_EQ(error_kind([] { simulate_dip(make_pipeline({1.0}, {1.0, 1.0}), one_per_mb({item(0, 1, 1)})); }),
            ErrorKind::kInvalidInput);
}

TEST(Dip, HoldsEveryEncoderActivationAtOnce) {
  PipelineModel c = make_colocated_pipeline(2);
  c.bytes_per_token = 1.0;
  std::vector<WorkItem> v = {item(0, 1, 1, 10, 0), item(1, 1, 1, 20, 0), item(2, 1, 1, 30, 0)};
  ScheduleTrace t = simulate_dip(c, one_per_mb(v));
  // Encoder forwards all finish before any encoder backward frees memory.
  EXPECT_GE(t.peak_memory[0], 60.0);
}

TEST(Memory, DipPeakAtLeastEntrainPeak) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Minibatch mb{0, oracle::random_items(seed, 64)};
    for (auto& it : mb.samples) it.sample.encoder_tokens = 1 + static_cast<std::int64_t>(100 * it.work.encoder);
    ExecutionPlan plan = to_execution_plan(build_plan(mb, 16));
    PipelineModel pipe = make_pipeline({1.0, 1.0}, {1.0, 1.0});
    PipelineModel colo = make_colocated_pipeline(4);
    double e = metrics(simulate_entrain(pipe, plan)).max_peak_memory;
    double d = metrics(simulate_dip(colo, plan)).max_peak_memory;
    EXPECT_GE(d, e) << seed;
  }
}

}  // namespace
}  // namespace mmpipe
