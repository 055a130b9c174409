// Copyright 2026 The mmpipe Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Trace checks, metrics and file formats.

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "mmpipe/error.h"
#include "mmpipe/simulator.h"

namespace mmpipe {

double population_std(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(values.size()));
}

TraceMetrics metrics(const ScheduleTrace& trace) {
  TraceMetrics m;
  m.iteration_time = trace.iteration_time;
  m.bubble_fraction = trace.bubble_fraction;
  m.encoder_fwd_std = population_std(trace.encoder_fwd_times);
  m.llm_fwd_std = population_std(trace.llm_fwd_times);
  m.peak_memory = trace.peak_memory;
  for (double p : m.peak_memory) m.max_peak_memory = std::max(m.max_peak_memory, p);
  return m;
}

namespace {

std::string describe(const ScheduleEvent& e) {
  std::ostringstream os;
  os << to_string(e.phase) << "(mb " << e.microbatch << ", stage " << e.stage << ", "
     << to_string(e.subset) << ", rank " << e.rank << ") [" << e.start << ", " << e.end << "]";
  return os.str();
}

bool is_forward(Phase p) { return p == Phase::kEncFwd || p == Phase::kLlmFwd; }

}  // namespace

std::vector<std::string> validate_trace(const ScheduleTrace& trace, const ExecutionPlan& plan) {
  std::vector<std::string> report;
  const int n_stages = static_cast<int>(trace.stages.size());
  int n_enc = 0;
  for (const auto& s : trace.stages) n_enc += s.kind == ComponentKind::kEncoder ? 1 : 0;

  double scale = 1.0;
  for (const auto& e : trace.events) scale = std::max(scale, std::fabs(e.end));
  const double eps = 1e-9 * scale;

  std::unordered_map<SampleId, int> enc_mb, llm_mb;
  for (const auto& mb : plan.microbatches) {
    for (const auto& s : mb.encoder_samples) enc_mb[s.sample.id] = mb.index;
    for (const auto& s : mb.llm_samples) llm_mb[s.sample.id] = mb.index;
  }
  for (const auto& [id, m] : enc_mb) {
    if (!llm_mb.count(id)) {
      report.push_back("sample " + std::to_string(id) + " has no LLM microbatch in the plan");
    }
  }

  // (a) one event per sample per (stage, phase); remember it for (b).
  // Index 0 forward, 1 backward.
  std::map<std::pair<SampleId, int>, const ScheduleEvent*> seen[2];
  for (const auto& e : trace.events) {
    if (e.stage < 0 || e.stage >= n_stages) {
      report.push_back("event on unknown stage: " + describe(e));
      continue;
    }
    bool enc_stage = trace.stages[e.stage].kind == ComponentKind::kEncoder;
    bool enc_phase = e.phase == Phase::kEncFwd || e.phase == Phase::kEncBwd;
    if (enc_stage != enc_phase) report.push_back("phase does not match stage: " + describe(e));
    if (e.end < e.start) report.push_back("event ends before it starts: " + describe(e));
    const auto& owner = enc_phase ? enc_mb : llm_mb;
    for (SampleId id : e.samples) {
      auto it = owner.find(id);
      if (it == owner.end() || it->second != e.microbatch) {
        report.push_back("sample " + std::to_string(id) + " is not planned in " + describe(e));
      }
      auto& slot = seen[is_forward(e.phase) ? 0 : 1][{id, e.stage}];
      if (slot != nullptr) {
        report.push_back("sample " + std::to_string(id) + " repeated: " + describe(*slot) +
                         " and " + describe(e));
      }
      slot = &e;
    }
  }
  for (const auto& [id, m] : enc_mb) {
    for (int s = 0; s < n_stages; ++s) {
      for (int dir = 0; dir < 2; ++dir) {
        if (!seen[dir].count({id, s})) {
          report.push_back("sample " + std::to_string(id) + " missing " +
                           (dir == 0 ? "forward" : "backward") + " at stage " + std::to_string(s));
        }
      }
    }
  }

  // (b) per-sample dependency chain: forwards in stage order, then
  // backwards in reverse stage order.
  for (const auto& [id, m] : enc_mb) {
    std::vector<const ScheduleEvent*> chain;
    bool complete = true;
    for (int s = 0; s < n_stages && complete; ++s) {
      auto it = seen[0].find({id, s});
      complete = it != seen[0].end();
      if (complete) chain.push_back(it->second);
    }
    for (int s = n_stages - 1; s >= 0 && complete; --s) {
      auto it = seen[1].find({id, s});
      complete = it != seen[1].end();
      if (complete) chain.push_back(it->second);
    }
    if (!complete) continue;
    for (std::size_t i = 1; i < chain.size(); ++i) {
      if (chain[i]->start + eps < chain[i - 1]->end) {
        report.push_back("dependency violated for sample " + std::to_string(id) + ": " +
                         describe(*chain[i - 1]) + " before " + describe(*chain[i]));
      }
    }
  }

  // (c) no overlap on a rank.
  std::map<int, std::vector<const ScheduleEvent*>> by_rank;
  for (const auto& e : trace.events) by_rank[e.rank].push_back(&e);
  for (auto& [rank, evs] : by_rank) {
    std::stable_sort(evs.begin(), evs.end(), [](const ScheduleEvent* a, const ScheduleEvent* b) {
      if (a->start != b->start) return a->start < b->start;
      return a->end < b->end;
    });
    for (std::size_t i = 1; i < evs.size(); ++i) {
      if (evs[i]->start + eps < evs[i - 1]->end) {
        report.push_back("overlap on rank " + std::to_string(rank) + ": " + describe(*evs[i - 1]) +
                         " and " + describe(*evs[i]));
      }
    }
  }

  // (d) deferred encoder backward after the partner's LLM backward.
  if (n_enc < n_stages) {
    std::map<int, const ScheduleEvent*> first_llm_bwd;
    for (const auto& e : trace.events) {
      if (e.phase == Phase::kLlmBwd && e.stage == n_enc) first_llm_bwd[e.microbatch] = &e;
    }
    for (const auto& e : trace.events) {
      if (e.subset != Subset::kDeferredPart) continue;
      if (e.microbatch < 0 || e.microbatch >= static_cast<int>(plan.microbatches.size())) continue;
      const ExecMicrobatch& mb = plan.microbatches[e.microbatch];
      std::unordered_set<SampleId> out(mb.deferred_out.begin(), mb.deferred_out.end());
      for (SampleId id : e.samples) {
        if (!out.count(id)) {
          report.push_back("sample " + std::to_string(id) + " is not deferred: " + describe(e));
        }
      }
      auto it = first_llm_bwd.find(mb.partner);
      if (it == first_llm_bwd.end()) {
        report.push_back("deferred part without partner backward: " + describe(e));
      } else if (e.start + eps < it->second->end) {
        report.push_back("deferred part before partner backward: " + describe(*it->second) +
                         " and " + describe(e));
      }
    }
  }
  return report;
}

std::vector<std::string> check_deferred_residency(const ScheduleTrace& trace) {
  std::vector<std::string> report;
  int first_llm = -1;
  for (const auto& s : trace.stages) {
    if (s.kind == ComponentKind::kLlm) {
      first_llm = s.stage_id;
      break;
    }
  }
  std::map<int, std::vector<const DeferredBuffer*>> by_rank;
  for (const auto& b : trace.deferred_buffers) {
    by_rank[b.rank].push_back(&b);
    if (b.end < b.start) {
      report.push_back("buffer of mb " + std::to_string(b.microbatch) + " is released before " +
                       "it is filled");
    }
    for (const auto& e : trace.events) {
      if (e.phase != Phase::kLlmFwd || e.stage != first_llm || e.rank != b.rank) continue;
      if (e.start > b.start && e.start < b.end) {
        report.push_back("buffer of mb " + std::to_string(b.microbatch) +
                         " outlives one microbatch interval: " + describe(e));
      }
    }
  }
  for (auto& [rank, bufs] : by_rank) {
    std::sort(bufs.begin(), bufs.end(), [](const DeferredBuffer* a, const DeferredBuffer* b) {
      return a->start < b->start;
    });
    for (std::size_t i = 1; i < bufs.size(); ++i) {
      if (bufs[i]->start < bufs[i - 1]->end) {
        report.push_back("two deferred buffers alive on rank " + std::to_string(rank) +
                         ": mb " + std::to_string(bufs[i - 1]->microbatch) + " and mb " +
                         std::to_string(bufs[i]->microbatch));
      }
    }
  }
  return report;
}

void write_trace_csv(std::ostream& out, const ScheduleTrace& trace) {
  out << "rank,microbatch,subset,phase,start,end\n";
  auto old = out.precision(17);
  for (const auto& e : trace.events) {
    out << e.rank << ',' << e.microbatch << ',' << to_string(e.subset) << ','
        << to_string(e.phase) << ',' << e.start << ',' << e.end << '\n';
  }
  out.precision(old);
}

std::vector<ScheduleEvent> read_trace_csv(std::istream& in) {
  std::vector<ScheduleEvent> events;
  std::string line;
  if (!std::getline(in, line) || line != "rank,microbatch,subset,phase,start,end") {
    throw_invalid("trace CSV: missing or unexpected header");
  }
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw_invalid("trace CSV line " + std::to_string(line_no) + ": 6 fields expected");
    ScheduleEvent e;
    try {
      e.rank = std::stoi(f[0]);
      e.microbatch = std::stoi(f[1]);
      e.start = std::stod(f[4]);
      e.end = std::stod(f[5]);
    } catch (const std::exception&) {
      throw_invalid("trace CSV line " + std::to_string(line_no) + ": bad number");
    }
    e.subset = parse_subset(f[2]);
    e.phase = parse_phase(f[3]);
    e.stage = -1;
    events.push_back(std::move(e));
  }
  return events;
}

std::string metrics_to_json(const TraceMetrics& m) {
  nlohmann::json j = {{"iteration_time", m.iteration_time},
                      {"bubble_fraction", m.bubble_fraction},
                      {"encoder_fwd_std", m.encoder_fwd_std},
                      {"llm_fwd_std", m.llm_fwd_std},
                      {"peak_memory", m.peak_memory},
                      {"max_peak_memory", m.max_peak_memory}};
  return j.dump(2);
}

}  // namespace mmpipe
