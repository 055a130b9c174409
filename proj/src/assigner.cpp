// Copyright 2026 The mmpipe Authors.
// SPDX-License-Identifier: Apache-2.0

#include "mmpipe/assigner.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "json.hpp"
#include "mmpipe/error.h"

namespace mmpipe {

using nlohmann::json;

std::vector<Minibatch> assign_to_replicas(std::span<const WorkItem> samples, int dp) {
  if (dp < 1) throw_invalid("assign_to_replicas: dp must be at least 1");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (samples[a].work.encoder != samples[b].work.encoder) {
      return samples[a].work.encoder > samples[b].work.encoder;
    }
    return samples[a].sample.id < samples[b].sample.id;
  });

  std::vector<double> llm_load(dp, 0.0);
  std::vector<int> owner(samples.size(), 0);
  for (std::size_t idx : order) {
    int r = static_cast<int>(std::min_element(llm_load.begin(), llm_load.end()) - llm_load.begin());
    owner[idx] = r;
    llm_load[r] += samples[idx].work.llm;
  }

  std::vector<Minibatch> out(dp);
  for (int r = 0; r < dp; ++r) out[r].replica_id = r;
  for (std::size_t i = 0; i < samples.size(); ++i) out[owner[i]].samples.push_back(samples[i]);
  return out;
}

int effective_microbatch_count(std::span<const WorkItem> samples, int k_requested) {
  if (samples.empty()) throw_invalid("effective_microbatch_count: empty minibatch");
  if (k_requested < 1) throw_invalid("effective_microbatch_count: K must be at least 1");
  double total = 0.0, largest = 0.0;
  for (const auto& s : samples) {
    total += s.work.encoder;
    largest = std::max(largest, s.work.encoder);
  }
  if (largest <= 0.0) {
    return std::clamp(k_requested, 1, static_cast<int>(samples.size()));
  }
  // The small slack keeps exact multiples (18 / 3) from flooring down.
  double ratio = std::floor(total / largest + 1e-9);
  int k = static_cast<int>(std::min<double>(k_requested, ratio));
  return std::max(1, k);
}

bool Microbatch::is_fine(SampleId id) const {
  return std::find(fine_ids.begin(), fine_ids.end(), id) != fine_ids.end();
}

std::vector<Microbatch> stratified_assign(std::span<const WorkItem> samples, int k_eff) {
  if (k_eff < 1) throw_invalid("stratified_assign: k_eff must be at least 1");
  std::vector<const WorkItem*> by_llm;
  by_llm.reserve(samples.size());
  for (const auto& s : samples) by_llm.push_back(&s);
  std::stable_sort(by_llm.begin(), by_llm.end(), [](const WorkItem* a, const WorkItem* b) {
    if (a->work.llm != b->work.llm) return a->work.llm > b->work.llm;
    return a->sample.id < b->sample.id;
  });
  const std::size_t n_coarse = by_llm.size() / 2;
  std::vector<const WorkItem*> coarse(by_llm.begin(), by_llm.begin() + n_coarse);
  std::vector<const WorkItem*> fine(by_llm.begin() + n_coarse, by_llm.end());
  auto by_encoder = [](const WorkItem* a, const WorkItem* b) {
    if (a->work.encoder != b->work.encoder) return a->work.encoder > b->work.encoder;
    return a->sample.id < b->sample.id;
  };
  std::stable_sort(coarse.begin(), coarse.end(), by_encoder);
  std::stable_sort(fine.begin(), fine.end(), by_encoder);

  std::vector<Microbatch> mbs(k_eff);
  for (int i = 0; i < k_eff; ++i) mbs[i].index = i;
  auto place = [&](const WorkItem* item, bool is_fine) {
    auto it = std::min_element(mbs.begin(), mbs.end(), [](const Microbatch& a, const Microbatch& b) {
      return a.w_encoder_total < b.w_encoder_total;
    });
    it->samples.push_back(*item);
    if (is_fine) it->fine_ids.push_back(item->sample.id);
    it->w_encoder_total += item->work.encoder;
    it->w_llm_resident += item->work.llm;
  };
  for (const auto* item : coarse) place(item, false);
  for (const auto* item : fine) place(item, true);
  return mbs;
}

MicrobatchPlan build_plan(const Minibatch& minibatch, int k_requested,
                          const AssignerOptions& options) {
  if (minibatch.samples.empty()) throw_invalid("build_plan: empty minibatch");
  if (!(options.resolution_fraction > 0.0)) {
    throw_invalid("build_plan: resolution fraction must be positive");
  }
  MicrobatchPlan plan;
  plan.k_eff = effective_microbatch_count(minibatch.samples, k_requested);
  plan.encoder = stratified_assign(minibatch.samples, plan.k_eff);
  const int k = plan.k_eff;
  plan.llm_resident.resize(k);
  plan.partner.assign(k, -1);
  for (int i = 0; i < k; ++i) plan.llm_resident[i] = plan.encoder[i].w_llm_resident;

  auto finish = [&] {
    plan.deferral.t_star = *std::max_element(plan.llm_resident.begin(), plan.llm_resident.end());
  };

  if (!options.enable_deferral || k < 2) {
    plan.deferral.order.resize(k);
    std::iota(plan.deferral.order.begin(), plan.deferral.order.end(), 0);
    finish();
    return plan;
  }

  std::vector<int> ranked(k);
  std::iota(ranked.begin(), ranked.end(), 0);
  std::stable_sort(ranked.begin(), ranked.end(), [&](int a, int b) {
    if (plan.llm_resident[a] != plan.llm_resident[b]) {
      return plan.llm_resident[a] > plan.llm_resident[b];
    }
    return a < b;
  });
  const int n_ol = k / 2;
  std::vector<int> s_ol(ranked.begin(), ranked.begin() + n_ol);
  std::vector<int> s_ul(ranked.begin() + n_ol, ranked.end());

  std::vector<std::vector<double>> cost(n_ol, std::vector<double>(s_ul.size()));
  std::vector<std::vector<DeferralChoice>> choice(n_ol, std::vector<DeferralChoice>(s_ul.size()));
  std::vector<double> standalone(n_ol);
  for (int r = 0; r < n_ol; ++r) {
    const Microbatch& ol = plan.encoder[s_ol[r]];
    standalone[r] = ol.w_llm_resident;
    const double resolution = options.resolution_fraction * ol.w_llm_resident;
    for (std::size_t c = 0; c < s_ul.size(); ++c) {
      const Microbatch& ul = plan.encoder[s_ul[c]];
      if (resolution > 0.0) choice[r][c] = optimal_deferral_set(ol, ul, resolution);
      cost[r][c] = bottleneck_cost(ol.w_llm_resident, ul.w_llm_resident, choice[r][c].deferred);
    }
  }
  MatchResult match = bottleneck_match(cost, standalone);

  std::vector<char> matched_col(s_ul.size(), 0);
  for (const auto& p : match.pairing) {
    const int i = s_ol[p.overloaded];
    const int j = s_ul[p.underloaded];
    matched_col[p.underloaded] = 1;
    const DeferralChoice& d = choice[p.overloaded][p.underloaded];
    bool apply = p.defers ||
                 (options.defer_noncritical && cost[p.overloaded][p.underloaded] < standalone[p.overloaded]);
    apply = apply && !d.sample_ids.empty();
    plan.deferral.pairing.push_back({i, j, apply});
    plan.deferral.order.push_back(i);
    plan.deferral.order.push_back(j);
    if (!apply) continue;
    plan.deferral.deferred[i] = d.sample_ids;
    plan.partner[i] = j;
    plan.llm_resident[i] -= d.deferred;
    plan.llm_resident[j] += d.deferred;
  }
  for (std::size_t c = 0; c < s_ul.size(); ++c) {
    if (!matched_col[c]) plan.deferral.order.push_back(s_ul[c]);
  }
  finish();
  return plan;
}

std::string plan_to_json(const MicrobatchPlan& plan) {
  json mbs = json::array();
  for (const auto& mb : plan.encoder) {
    json ids = json::array();
    for (const auto& s : mb.samples) ids.push_back(s.sample.id);
    mbs.push_back({{"index", mb.index},
                   {"samples", ids},
                   {"fine", mb.fine_ids},
                   {"w_encoder", mb.w_encoder_total},
                   {"w_llm", mb.w_llm_resident},
                   {"llm_resident", plan.llm_resident[mb.index]},
                   {"partner", plan.partner[mb.index]}});
  }
  json pairing = json::array();
  for (const auto& p : plan.deferral.pairing) {
    pairing.push_back({{"overloaded", p.overloaded},
                       {"underloaded", p.underloaded},
                       {"defers", p.defers}});
  }
  json deferred = json::array();
  for (const auto& [idx, ids] : plan.deferral.deferred) {
    deferred.push_back({{"microbatch", idx}, {"samples", ids}});
  }
  json out = {{"k_eff", plan.k_eff},
              {"t_star", plan.deferral.t_star},
              {"order", plan.deferral.order},
              {"microbatches", mbs},
              {"pairing", pairing},
              {"deferred", deferred}};
  return out.dump(2);
}

MicrobatchPlan plan_from_json(const std::string& text, std::span<const WorkItem> samples) {
  std::unordered_map<SampleId, const WorkItem*> by_id;
  for (const auto& s : samples) by_id[s.sample.id] = &s;
  MicrobatchPlan plan;
  try {
    json j = json::parse(text);
    plan.k_eff = j.at("k_eff").get<int>();
    if (plan.k_eff < 1) throw_invalid("plan: k_eff must be at least 1");
    plan.encoder.resize(plan.k_eff);
    plan.llm_resident.assign(plan.k_eff, 0.0);
    plan.partner.assign(plan.k_eff, -1);
    for (const auto& m : j.at("microbatches")) {
      int idx = m.at("index").get<int>();
      if (idx < 0 || idx >= plan.k_eff) throw_invalid("plan: microbatch index out of range");
      Microbatch& mb = plan.encoder[idx];
      mb.index = idx;
      for (SampleId id : m.at("samples").get<std::vector<SampleId>>()) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw_invalid("plan: unknown sample id " + std::to_string(id));
        mb.samples.push_back(*it->second);
        mb.w_encoder_total += it->second->work.encoder;
        mb.w_llm_resident += it->second->work.llm;
      }
      mb.fine_ids = m.at("fine").get<std::vector<SampleId>>();
      plan.partner[idx] = m.at("partner").get<int>();
    }
    for (const auto& p : j.at("pairing")) {
      plan.deferral.pairing.push_back({p.at("overloaded").get<int>(),
                                       p.at("underloaded").get<int>(), p.at("defers").get<bool>()});
    }
    for (const auto& d : j.at("deferred")) {
      plan.deferral.deferred[d.at("microbatch").get<int>()] =
          d.at("samples").get<std::vector<SampleId>>();
    }
    plan.deferral.order = j.at("order").get<std::vector<int>>();
    plan.deferral.t_star = j.at("t_star").get<double>();
  } catch (const json::exception& e) {
    throw_invalid(std::string("plan: malformed JSON: ") + e.what());
  }

  // Resident LLM work is recomputed from membership so the file cannot
  // disagree with the sample workloads.
  for (int i = 0; i < plan.k_eff; ++i) plan.llm_resident[i] = plan.encoder[i].w_llm_resident;
  for (const auto& [idx, ids] : plan.deferral.deferred) {
    if (idx < 0 || idx >= plan.k_eff) throw_invalid("plan: deferral index out of range");
    int partner = plan.partner[idx];
    if (partner < 0 || partner >= plan.k_eff) throw_invalid("plan: deferral without partner");
    for (SampleId id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw_invalid("plan: unknown deferred sample id");
      plan.llm_resident[idx] -= it->second->work.llm;
      plan.llm_resident[partner] += it->second->work.llm;
    }
  }
  return plan;
}

}  // namespace mmpipe
