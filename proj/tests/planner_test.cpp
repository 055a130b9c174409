// Copyright 2026 The mmpipe Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mmpipe/planner.h"
#include "oracles.h"
#include "test_util.h"

namespace mmpipe {
namespace {

WorkloadTable two_column(const std::vector<std::pair<double, double>>& rows) {
  std::vector<double> v;
  for (auto [a, b] : rows) {
    v.push_back(a);
    v.push_back(b);
  }
  return WorkloadTable(2, v);
}

ModelSpec small_model(int enc_layers, int llm_layers, double param_bytes = 1e6) {
  ModelSpec m;
  ComponentSpec enc{"vit", ComponentKind::kEncoder, {}};
  ComponentSpec llm{"lm", ComponentKind::kLlm, {}};
  int id = 0;
  for (int i = 0; i < enc_layers; ++i) enc.layers.push_back({id++, "vit", ScalingClass::kQuadratic, param_bytes});
  for (int i = 0; i < llm_layers; ++i) llm.layers.push_back({id++, "lm", ScalingClass::kQuadratic, param_bytes});
  m.components = {enc, llm};
  return m;
}

std::vector<Degrees> power_grid(int n) {
  std::vector<Degrees> g;
  for (int tp = 1; tp <= n; tp *= 2) {
    for (int cp = 1; tp * cp <= n; cp *= 2) g.push_back({tp, cp});
  }
  return g;
}

TEST(RequiredTrials, KnownValues) {
  EXPECT_EQ(required_trials(0.05, 0.05), 59);
  EXPECT_EQ(required_trials(0.01, 0.01), 459);
  EXPECT_EQ(required_trials(0.5, 0.5), 1);
  EXPECT_EQ(required_trials(0.25, 0.5), 2);
  EXPECT_EQ(error_kind([] { required_trials(0.0, 0.5); }), ErrorKind::kInvalidInput);
  EXPECT_EQ(error_kind([] { required_trials(0.5, 1.0); }), ErrorKind::kInvalidInput);
}

TEST(ProportionalAllocation, HandExamples) {
  EXPECT_EQ(proportional_allocation(16, 1, {{0.3, 0.7}}).gpus, (std::vector<int>{5, 11}));
  EXPECT_EQ(proportional_allocation(16, 2, {{0.5, 0.5}}).gpus, (std::vector<int>{4, 4}));
  // The one-GPU floor wins over a tiny share.
  EXPECT_EQ(proportional_allocation(8, 1, {{0.01, 0.99}}).gpus, (std::vector<int>{1, 7}));
  EXPECT_EQ(proportional_allocation(8, 1, {{0.2, 0.3, 0.5}}).gpus, (std::vector<int>{2, 2, 4}));
  EXPECT_EQ(error_kind([] { proportional_allocation(2, 2, {{0.5, 0.5}}); }),
            ErrorKind::kInfeasible);
  EXPECT_EQ(error_kind([] { proportional_allocation(6, 4, {{0.5, 0.5}}); }),
            ErrorKind::kInvalidInput);
}

// Hamilton apportionment with a floor of one, written independently.
std::vector<int> hamilton(int budget, const std::vector<double>& f) {
  const int n = static_cast<int>(f.size());
  std::vector<double> q(n);
  std::vector<int> a(n);
  for (int i = 0; i < n; ++i) {
    q[i] = f[i] * budget;
    a[i] = static_cast<int>(q[i]);
  }
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int x, int y) { return q[x] - a[x] > q[y] - a[y]; });
  int left = budget - std::accumulate(a.begin(), a.end(), 0);
  for (int i = 0; i < left; ++i) ++a[idx[i]];
  return a;
}

TEST(ProportionalAllocation, MatchesHamiltonWhenFloorInactive) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.2, 1.0);
  for (int t = 0; t < 2000; ++t) {
    int budget = 4 + t % 29;
    std::vector<double> w = {u(rng), u(rng)};
    double s = w[0] + w[1];
    std::vector<double> f = {w[0] / s, w[1] / s};
    GpuAllocation a = proportional_allocation(budget, 1, {f});
    EXPECT_EQ(a.total(), budget);
    auto want = hamilton(budget, f);
    if (want[0] >= 1 && want[1] >= 1) {
      EXPECT_EQ(a.gpus, want) << budget << " " << f[0];
    }
  }
}

TEST(Proportions, ConstantTableGivesExactShares) {
  WorkloadTable t = two_column({{1.0, 3.0}, {1.0, 3.0}});
  auto p = estimate_macroscopic_proportions(t, 17, std::uint64_t{4});
  EXPECT_DOUBLE_EQ(p.fractions[0], 0.25);
  EXPECT_DOUBLE_EQ(p.fractions[1], 0.75);
}

TEST(StableBatch, ConstantDatasetStopsAtN0) {
  WorkloadTable t = two_column({{2.0, 2.0}});
  ClusterSpec c;
  c.n_total = 16;
  ProfilingOptions opt;
  opt.n0 = 8;
  auto r = find_min_stable_batch(opt, c, 1, t, 1);
  EXPECT_EQ(r.b_min, 8);
  EXPECT_EQ(r.trials, 59);
  ASSERT_EQ(r.log.size(), 1u);
  EXPECT_TRUE(r.log[0].passed);
  EXPECT_EQ(r.log[0].trials_run, 59);
  EXPECT_EQ(r.reference.gpus, (std::vector<int>{8, 8}));
}

TEST(StableBatch, DoublesUntilStableAndIsDeterministic) {
  std::mt19937_64 rng(3);
  std::lognormal_distribution<double> ln(0.0, 1.0);
  std::vector<std::pair<double, double>> rows;
  for (int i = 0; i < 4000; ++i) rows.push_back({ln(rng), 2.0 * ln(rng)});
  WorkloadTable t = two_column(rows);
  ClusterSpec c;
  c.n_total = 16;
  ProfilingOptions opt;
  opt.full_trial_log = true;
  auto a = find_min_stable_batch(opt, c, 1, t, 42);
  auto b = find_min_stable_batch(opt, c, 1, t, 42);
  EXPECT_EQ(a.b_min, b.b_min);
  ASSERT_FALSE(a.log.empty());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].batch_size, 1 << i);
    EXPECT_EQ(a.log[i].passed, i + 1 == a.log.size());
    EXPECT_EQ(a.log[i].trials_run, 59);
    if (!a.log[i].passed) {
      EXPECT_GE(a.log[i].allocations_seen.size(), 2u);
    }
  }
  EXPECT_EQ(a.b_min, a.log.back().batch_size);
}

TEST(StableBatch, BreakpointMeanHitsCap) {
  // Mean encoder share 1/2 with three GPUs: 1.5 GPUs each, never stable.
  WorkloadTable t = two_column({{3.0, 1.0}, {1.0, 3.0}});
  ClusterSpec c;
  c.n_total = 3;
  ProfilingOptions opt;
  opt.max_batch = 1024;
  EXPECT_EQ(error_kind([&] { find_min_stable_batch(opt, c, 1, t, 7); }),
            ErrorKind::kInfeasible);
}

TEST(TerminationBound, HandComputed) {
  WorkloadTable t = two_column({{1.0, 3.0}, {3.0, 1.0}});
  auto b = termination_bound(t, 4);
  ASSERT_TRUE(b.has_value());
  EXPECT_DOUBLE_EQ(b->mean_ratio, 0.5);
  EXPECT_DOUBLE_EQ(b->ratio_std, 0.25);
  EXPECT_DOUBLE_EQ(b->breakpoint_distance, 0.125);
  EXPECT_DOUBLE_EQ(b->n_star_bound, 144.0);
}

TEST(IntraModuleBalance, HandExample) {
  std::vector<double> costs = {1, 2, 3, 4, 5};
  StagePartition p = intra_module_balance(costs, 2);
  EXPECT_DOUBLE_EQ(p.bottleneck, 9.0);
  EXPECT_EQ(p.stages, (std::vector<std::pair<int, int>>{{0, 2}, {3, 4}}));
  EXPECT_EQ(p.latencies, (std::vector<double>{6.0, 9.0}));
  EXPECT_EQ(error_kind([&] { intra_module_balance(costs, 6); }), ErrorKind::kInfeasible);
}

TEST(IntraModuleBalance, MatchesBruteForce) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.1, 10.0);
  for (int t = 0; t < 500; ++t) {
    int n = 1 + static_cast<int>(rng() % 10);
    int pp = 1 + static_cast<int>(rng() % std::min(n, 4));
    std::vector<double> c(n);
    for (auto& x : c) x = u(rng);
    StagePartition p = intra_module_balance(c, pp);
    EXPECT_EQ(p.bottleneck, oracle::brute_partition_bottleneck(c, pp));
    ASSERT_EQ(static_cast<int>(p.stages.size()), pp);
    EXPECT_EQ(p.stages.front().first, 0);
    EXPECT_EQ(p.stages.back().second, n - 1);
    for (int s = 1; s < pp; ++s) EXPECT_EQ(p.stages[s].first, p.stages[s - 1].second + 1);
    EXPECT_EQ(*std::max_element(p.latencies.begin(), p.latencies.end()), p.bottleneck);
  }
}

TEST(ScheduleIterationTime, HandExample) {
  StagePartition a{{{0, 0}, {1, 1}}, {2.0, 3.0}, 3.0};
  StagePartition b{{{0, 0}}, {4.0}, 4.0};
  std::vector<StagePartition> parts = {a, b};
  EXPECT_DOUBLE_EQ(schedule_iteration_time(5, parts, 1.0), 9.0 + 4 * 4.0 + 1.0);
}

TEST(ReshardCost, OnlyBetweenDifferentDegrees) {
  ParallelConfig cfg;
  cfg.components = {{2, 1, 1}, {1, 1, 2}};
  ClusterSpec c;
  c.bytes_per_token_activation = 1000;
  c.reshard_bandwidth = 1e6;
  EXPECT_DOUBLE_EQ(reshard_cost(cfg, 4, 50.0, c), 1000.0 * 4 * 50 * 1000 / 1e6);
  cfg.components = {{1, 1, 1}, {1, 1, 2}};
  EXPECT_DOUBLE_EQ(reshard_cost(cfg, 4, 50.0, c), 0.0);
}

TEST(MemoryEstimate, HandComputed) {
  ModelSpec m = small_model(1, 2, 100.0);
  ParallelConfig cfg;
  cfg.components = {{1, 1, 1}, {2, 1, 2}};
  cfg.partitions = {intra_module_balance(std::vector<double>{1.0}, 1),
                    intra_module_balance(std::vector<double>{1.0, 1.0}, 2)};
  cfg.microbatches = 8;
  ClusterSpec c;
  c.bytes_per_token_activation = 2;
  MemoryModel mem{3.0, {10.0, 20.0}};
  auto ranks = memory_per_rank(cfg, m, mem, c);
  ASSERT_EQ(ranks.size(), 3u);
  // Stage s holds depth - s microbatches in flight.
  EXPECT_DOUBLE_EQ(ranks[0], 100.0 * 4 + 3 * 10.0 * 2);
  EXPECT_DOUBLE_EQ(ranks[1], 50.0 * 4 + 2 * 20.0 * 2 / 2);
  EXPECT_DOUBLE_EQ(ranks[2], 50.0 * 4 + 1 * 20.0 * 2 / 2);
  EXPECT_DOUBLE_EQ(memory_estimate(cfg, m, mem, c), ranks[0]);
}

struct SearchFixture {
  ModelSpec model = small_model(4, 8, 1e6);
  ClusterSpec cluster;
  LayerCostModel costs;
  std::vector<Sample> dataset;

  SearchFixture() {
    cluster.n_total = 8;
    costs = make_reference_cost_model(model, power_grid(8));
    DatasetSpec spec;
    spec.n_samples = 400;
    spec.encoder = {DistributionFamily::kLogNormal, 6.0, 0.8};
    spec.text = {DistributionFamily::kLogNormal, 5.0, 0.8};
    dataset = generate_synthetic_dataset(spec);
  }
};

TEST(SearchConfig, MatchesExhaustiveEnumeration) {
  SearchFixture f;
  SearchOptions opt;
  opt.b_min = 64;
  opt.b_global = 64;
  opt.mu = 2;
  SearchResult r = search_config(opt, f.cluster, f.model, f.costs, f.dataset, 9);

  // Independent enumeration over every dp and (tp, cp, pp) split.
  double best = 0.0;
  std::vector<double> rep = r.representative_tokens;
  double enc = 0.0;
  for (const auto& s : f.dataset) enc += static_cast<double>(s.encoder_tokens);
  double boundary = enc / f.dataset.size() * opt.mu;
  for (int dp = 1; dp <= 8; ++dp) {
    if (8 % dp || 64 % (dp * opt.mu) || 8 / dp < 2) continue;
    GpuAllocation alloc = proportional_allocation(8, dp, r.proportions);
    int k = 64 / (dp * opt.mu);
    for (int tp0 = 1; tp0 <= alloc.gpus[0]; tp0 *= 2) {
      for (int cp0 = 1; tp0 * cp0 <= alloc.gpus[0]; cp0 *= 2) {
        if (alloc.gpus[0] % (tp0 * cp0)) continue;
        int pp0 = alloc.gpus[0] / (tp0 * cp0);
        if (pp0 > 4) continue;
        for (int tp1 = 1; tp1 <= alloc.gpus[1]; tp1 *= 2) {
          for (int cp1 = 1; tp1 * cp1 <= alloc.gpus[1]; cp1 *= 2) {
            if (alloc.gpus[1] % (tp1 * cp1)) continue;
            int pp1 = alloc.gpus[1] / (tp1 * cp1);
            if (pp1 > 8) continue;
            ParallelConfig cfg;
            cfg.dp = dp;
            cfg.microbatches = k;
            cfg.components = {{tp0, cp0, pp0}, {tp1, cp1, pp1}};
            for (int i = 0; i < 2; ++i) {
              const auto& par = cfg.components[i];
              cfg.partitions.push_back(intra_module_balance(f.model.components[i].layers, par.pp,
                                                            {par.tp, par.cp}, f.costs, rep[i], 3.0));
            }
            double t = schedule_iteration_time(k, cfg.partitions,
                                               reshard_cost(cfg, k, boundary, f.cluster));
            best = std::max(best, dp * k / t);
          }
        }
      }
    }
  }
  const ParallelConfig& c = r.best;
  EXPECT_NEAR(c.dp * c.microbatches / c.predicted_iteration_time, best, 1e-12 * best);
  for (std::size_t i = 0; i < c.components.size(); ++i) {
    EXPECT_EQ(c.components[i].gpus(), c.allocation.gpus[i]);
  }
  EXPECT_EQ(c.allocation.total() * c.dp, 8);
  EXPECT_NEAR(c.predicted_throughput, 1000.0 * c.dp * c.microbatches * opt.mu / c.predicted_iteration_time,
              1e-9);
}

TEST(SearchConfig, BalancedSixteenGpusSplitEvenly) {
  // Identical encoder and LLM stacks on text-free samples: equal workloads.
  ModelSpec m = small_model(8, 8);
  ClusterSpec c;
  c.n_total = 16;
  LayerCostModel costs = make_reference_cost_model(m, power_grid(16));
  std::vector<Sample> data;
  for (int i = 0; i < 64; ++i) data.push_back({i, 256 + 16 * (i % 5), 0});
  SearchOptions opt;
  opt.b_min = 32;
  opt.b_global = 32;
  opt.mu = 1;
  opt.dp = 1;
  SearchResult r = search_config(opt, c, m, costs, data, 2);
  EXPECT_EQ(to_string(r.best.allocation), "8:8");
}

TEST(SearchConfig, TinyVramIsInfeasible) {
  SearchFixture f;
  f.cluster.vram_per_gpu = 1.0;
  SearchOptions opt;
  opt.b_min = 16;
  opt.b_global = 16;
  EXPECT_EQ(error_kind([&] { search_config(opt, f.cluster, f.model, f.costs, f.dataset, 1); }),
            ErrorKind::kInfeasible);
}

TEST(SearchConfig, IndivisibleGlobalBatchSkipsDp) {
  SearchFixture f;
  SearchOptions opt;
  opt.b_min = 6;
  opt.b_global = 6;
  opt.mu = 3;
  SearchResult r = search_config(opt, f.cluster, f.model, f.costs, f.dataset, 1);
  EXPECT_EQ(6 % (r.best.dp * opt.mu), 0);
  EXPECT_GT(r.candidates_skipped, 0);
}

}  // namespace
}  // namespace mmpipe
