// Copyright 2026 The mmpipe Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "mmpipe/assigner.h"
#include "oracles.h"
#include "test_util.h"

namespace mmpipe {
namespace {

std::vector<WorkItem> items_from(const std::vector<std::pair<double, double>>& w) {
  std::vector<WorkItem> out;
  for (std::size_t i = 0; i < w.size(); ++i) {
    out.push_back({{static_cast<SampleId>(i), 1, 1}, {w[i].first, w[i].second}});
  }
  return out;
}

std::vector<SampleId> ids(const std::vector<WorkItem>& v) {
  std::vector<SampleId> out;
  for (const auto& it : v) out.push_back(it.sample.id);
  return out;
}

TEST(AssignToReplicas, HandExample) {
  auto items = items_from({{4, 1}, {3, 9}, {2, 1}, {1, 1}});
  auto mbs = assign_to_replicas(items, 2);
  ASSERT_EQ(mbs.size(), 2u);
  EXPECT_EQ(ids(mbs[0].samples), (std::vector<SampleId>{0, 2, 3}));
  EXPECT_EQ(ids(mbs[1].samples), (std::vector<SampleId>{1}));
  EXPECT_EQ(mbs[1].replica_id, 1);
  EXPECT_EQ(error_kind([&] { assign_to_replicas(items, 0); }), ErrorKind::kInvalidInput);
}

TEST(AssignToReplicas, PartitionsTheBatch) {
  auto items = oracle::random_items(3, 97);
  auto mbs = assign_to_replicas(items, 4);
  std::multiset<SampleId> seen;
  for (const auto& mb : mbs) {
    for (const auto& s : mb.samples) seen.insert(s.sample.id);
    EXPECT_TRUE(std::is_sorted(mb.samples.begin(), mb.samples.end(),
                               [](const WorkItem& a, const WorkItem& b) { return a.sample.id < b.sample.id; }));
  }
  EXPECT_EQ(seen.size(), items.size());
  EXPECT_EQ(std::set<SampleId>(seen.begin(), seen.end()).size(), items.size());
}

TEST(EffectiveMicrobatchCount, Examples) {
  auto even = items_from({{3, 1}, {3, 1}, {3, 1}, {3, 1}, {3, 1}, {3, 1}});
  EXPECT_EQ(effective_microbatch_count(even, 8), 6);
  EXPECT_EQ(effective_microbatch_count(even, 4), 4);
  auto skewed = items_from({{10, 1}, {1, 1}, {1, 1}, {1, 1}});
  EXPECT_EQ(effective_microbatch_count(skewed, 4), 1);
  auto zero = items_from({{0, 1}, {0, 2}, {0, 3}});
  EXPECT_EQ(effective_microbatch_count(zero, 10), 3);
  EXPECT_EQ(effective_microbatch_count(zero, 2), 2);
  EXPECT_EQ(error_kind([&] { effective_microbatch_count(even, 0); }), ErrorKind::kInvalidInput);
}

TEST(StratifiedAssign, StrataAndMembership) {
  auto items = oracle::random_items(8, 41);
  auto mbs = stratified_assign(items, 5);
  ASSERT_EQ(mbs.size(), 5u);
  // The fine stratum is everything outside the top floor(n/2) by LLM work.
  std::vector<WorkItem> by_llm = items;
  std::sort(by_llm.begin(), by_llm.end(), [](const WorkItem& a, const WorkItem& b) {
    return a.work.llm > b.work.llm;
  });
  std::set<SampleId> fine;
  for (std::size_t i = items.size() / 2; i < items.size(); ++i) fine.insert(by_llm[i].sample.id);
  std::set<SampleId> got_fine, all;
  for (const auto& mb : mbs) {
    double enc = 0.0, llm = 0.0;
    for (const auto& s : mb.samples) {
      enc += s.work.encoder;
      llm += s.work.llm;
      EXPECT_TRUE(all.insert(s.sample.id).second);
    }
    for (SampleId id : mb.fine_ids) {
      got_fine.insert(id);
      EXPECT_TRUE(mb.is_fine(id));
    }
    EXPECT_NEAR(enc, mb.w_encoder_total, 1e-12);
    EXPECT_NEAR(llm, mb.w_llm_resident, 1e-12);
  }
  EXPECT_EQ(all.size(), items.size());
  EXPECT_EQ(got_fine, fine);
}

TEST(StratifiedAssign, GrahamBound) {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    auto items = oracle::random_items(seed, 8 + seed % 60, 1.0 + (seed % 3) * 0.5);
    int k = 1 + static_cast<int>(seed % 16);
    int k_eff = effective_microbatch_count(items, k);
    auto mbs = stratified_assign(items, k_eff);
    double total = 0.0, largest = 0.0, makespan = 0.0;
    for (const auto& it : items) {
      total += it.work.encoder;
      largest = std::max(largest, it.work.encoder);
    }
    for (const auto& mb : mbs) makespan = std::max(makespan, mb.w_encoder_total);
    double bound = (2.0 - 1.0 / k_eff) * std::max(total / k_eff, largest);
    EXPECT_LE(makespan, bound * (1 + 1e-12)) << seed;
  }
}

void check_plan(const Minibatch& mb, const MicrobatchPlan& p) {
  const int k = p.k_eff;
  ASSERT_EQ(static_cast<int>(p.encoder.size()), k);
  std::vector<int> order = p.deferral.order;
  std::sort(order.begin(), order.end());
  std::vector<int> iota(k);
  std::iota(iota.begin(), iota.end(), 0);
  EXPECT_EQ(order, iota);

  double before = 0.0, after = 0.0;
  for (const auto& s : mb.samples) before += s.work.llm;
  for (double x : p.llm_resident) after += x;
  EXPECT_NEAR(before, after, 1e-9 * before);
  EXPECT_DOUBLE_EQ(p.deferral.t_star, *std::max_element(p.llm_resident.begin(), p.llm_resident.end()));

  std::set<int> partners;
  for (const auto& [idx, dids] : p.deferral.deferred) {
    ASSERT_GE(p.partner[idx], 0);
    EXPECT_TRUE(partners.insert(p.partner[idx]).second);
    EXPECT_FALSE(dids.empty());
    for (SampleId id : dids) {
      bool member = false;
      for (const auto& s : p.encoder[idx].samples) member |= s.sample.id == id;
      EXPECT_TRUE(member);
    }
    // Partner runs right after the deferring microbatch.
    auto it = std::find(p.deferral.order.begin(), p.deferral.order.end(), idx);
    ASSERT_NE(it + 1, p.deferral.order.end());
    EXPECT_EQ(*(it + 1), p.partner[idx]);
  }
}

TEST(BuildPlan, WorkedExamplePerfectBalance) {
  // Encoder totals 18 (max 3) and LLM total 36 over six microbatches.
  auto items = items_from({{2, 2}, {1, 4}, {1, 1}, {3, 5}, {2, 1}, {1, 2},
                           {1, 5}, {1, 6}, {1, 1}, {1, 1}, {1, 4}, {3, 4}});
  Minibatch mb{0, items};
  MicrobatchPlan p = build_plan(mb, 6);
  EXPECT_EQ(p.k_eff, 6);
  for (const auto& m : p.encoder) EXPECT_DOUBLE_EQ(m.w_encoder_total, 3.0);
  for (double x : p.llm_resident) EXPECT_DOUBLE_EQ(x, 6.0);
  EXPECT_DOUBLE_EQ(p.deferral.t_star, 6.0);
  EXPECT_EQ(p.deferral.deferred.size(), 2u);
  check_plan(mb, p);
}

TEST(BuildPlan, TStarEqualsBruteForceBottleneck) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Minibatch mb{0, oracle::random_items(seed + 1000, 16 + seed % 48)};
    AssignerOptions opt;
    MicrobatchPlan p = build_plan(mb, 2 + seed % 7, opt);
    check_plan(mb, p);
    const int k = p.k_eff;
    if (k < 2) continue;
    std::vector<int> ranked(k);
    std::iota(ranked.begin(), ranked.end(), 0);
    std::stable_sort(ranked.begin(), ranked.end(), [&](int a, int b) {
      return p.encoder[a].w_llm_resident > p.encoder[b].w_llm_resident;
    });
    const int n_ol = k / 2;
    std::vector<std::vector<double>> cost(n_ol);
    std::vector<double> standalone(n_ol);
    double ul_max = 0.0;
    for (int c = n_ol; c < k; ++c) ul_max = std::max(ul_max, p.encoder[ranked[c]].w_llm_resident);
    for (int r = 0; r < n_ol; ++r) {
      const Microbatch& ol = p.encoder[ranked[r]];
      standalone[r] = ol.w_llm_resident;
      for (int c = n_ol; c < k; ++c) {
        const Microbatch& ul = p.encoder[ranked[c]];
        auto d = optimal_deferral_set(ol, ul, opt.resolution_fraction * ol.w_llm_resident);
        cost[r].push_back(bottleneck_cost(ol.w_llm_resident, ul.w_llm_resident, d.deferred));
      }
    }
    double want = std::max(oracle::brute_bottleneck(cost, standalone), ul_max);
    EXPECT_DOUBLE_EQ(p.deferral.t_star, want) << seed;
    double before = *std::max_element(standalone.begin(), standalone.end());
    EXPECT_LE(p.deferral.t_star, before);
  }
}

TEST(BuildPlan, DeferralDisabledKeepsStaticOrder) {
  Minibatch mb{0, oracle::random_items(5, 64)};
  AssignerOptions opt;
  opt.enable_deferral = false;
  MicrobatchPlan p = build_plan(mb, 8, opt);
  check_plan(mb, p);
  EXPECT_TRUE(p.deferral.deferred.empty());
  EXPECT_TRUE(std::is_sorted(p.deferral.order.begin(), p.deferral.order.end()));
  for (int x : p.partner) EXPECT_EQ(x, -1);
  for (int i = 0; i < p.k_eff; ++i) EXPECT_EQ(p.llm_resident[i], p.encoder[i].w_llm_resident);
}

TEST(BuildPlan, NonCriticalDeferralStillConsistent) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Minibatch mb{0, oracle::random_items(seed + 77, 48)};
    AssignerOptions opt;
    opt.defer_noncritical = true;
    MicrobatchPlan all = build_plan(mb, 8, opt);
    MicrobatchPlan crit = build_plan(mb, 8);
    check_plan(mb, all);
    EXPECT_GE(all.deferral.deferred.size(), crit.deferral.deferred.size());
  }
}

TEST(BuildPlan, SingleSample) {
  Minibatch mb{0, items_from({{2, 3}})};
  MicrobatchPlan p = build_plan(mb, 4);
  EXPECT_EQ(p.k_eff, 1);
  EXPECT_EQ(p.deferral.order, (std::vector<int>{0}));
  EXPECT_EQ(error_kind([] { build_plan(Minibatch{}, 4); }), ErrorKind::kInvalidInput);
}

TEST(PlanFile, JsonRoundTrip) {
  Minibatch mb{0, oracle::random_items(12, 40)};
  MicrobatchPlan p = build_plan(mb, 6);
  MicrobatchPlan back = plan_from_json(plan_to_json(p), mb.samples);
  EXPECT_EQ(back.k_eff, p.k_eff);
  EXPECT_EQ(back.partner, p.partner);
  EXPECT_EQ(back.deferral.order, p.deferral.order);
  EXPECT_EQ(back.deferral.deferred, p.deferral.deferred);
  EXPECT_EQ(back.deferral.t_star, p.deferral.t_star);
  for (int i = 0; i < p.k_eff; ++i) {
    EXPECT_EQ(ids(back.encoder[i].samples), ids(p.encoder[i].samples));
    EXPECT_EQ(back.encoder[i].fine_ids, p.encoder[i].fine_ids);
    EXPECT_NEAR(back.llm_resident[i], p.llm_resident[i], 1e-9 * p.llm_resident[i]);
  }
  EXPECT_EQ(error_kind([&] { plan_from_json("{}", mb.samples); }), ErrorKind::kInvalidInput);
}

}  // namespace
}  // namespace mmpipe
