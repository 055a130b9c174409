// Copyright 2026 The mmpipe Authors.
// SPDX-License-Identifier: Apache-2.0

#include "mmpipe/simulator.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <unordered_set>

#include "mmpipe/error.h"

namespace mmpipe {

std::string to_string(Phase p) {
  switch (p) {
    case Phase::kEncFwd: return "enc_fwd";
    case Phase::kLlmFwd: return "llm_fwd";
    case Phase::kLlmBwd: return "llm_bwd";
    case Phase::kEncBwd: return "enc_bwd";
  }
  return "?";
}

std::string to_string(Subset s) {
  switch (s) {
    case Subset::kFull: return "full";
    case Subset::kDeferredPart: return "deferred";
    case Subset::kNonDeferredPart: return "non_deferred";
  }
  return "?";
}

Phase parse_phase(const std::string& text) {
  for (Phase p : {Phase::kEncFwd, Phase::kLlmFwd, Phase::kLlmBwd, Phase::kEncBwd}) {
    if (to_string(p) == text) return p;
  }
  throw_invalid("unknown phase '" + text + "'");
}

Subset parse_subset(const std::string& text) {
  for (Subset s : {Subset::kFull, Subset::kDeferredPart, Subset::kNonDeferredPart}) {
    if (to_string(s) == text) return s;
  }
  throw_invalid("unknown subset '" + text + "'");
}

int PipelineModel::rank_count() const {
  int r = 0;
  for (const auto& s : stages) r = std::max(r, s.rank + 1);
  return r;
}

int PipelineModel::encoder_stage_count() const {
  return static_cast<int>(std::count_if(stages.begin(), stages.end(),
                                        [](const StageModel& s) { return s.is_encoder_stage(); }));
}

int PipelineModel::llm_stage_count() const {
  return static_cast<int>(stages.size()) - encoder_stage_count();
}

namespace {

void append_stages(PipelineModel& p, const std::vector<double>& latencies, ComponentKind kind,
                   const char* id, double bwd_multiplier) {
  double total = std::accumulate(latencies.begin(), latencies.end(), 0.0);
  for (double l : latencies) {
    StageModel s;
    s.stage_id = static_cast<int>(p.stages.size());
    s.component_id = id;
    s.kind = kind;
    s.rank = s.stage_id;
    s.share = total > 0.0 ? l / total : 1.0 / static_cast<double>(latencies.size());
    s.bwd_multiplier = bwd_multiplier;
    p.stages.push_back(s);
  }
}

}  // namespace

PipelineModel make_pipeline(const std::vector<double>& encoder_stage_latencies,
                            const std::vector<double>& llm_stage_latencies,
                            double bwd_multiplier) {
  if (llm_stage_latencies.empty()) throw_invalid("make_pipeline: no LLM stages");
  PipelineModel p;
  append_stages(p, encoder_stage_latencies, ComponentKind::kEncoder, "encoder", bwd_multiplier);
  append_stages(p, llm_stage_latencies, ComponentKind::kLlm, "llm", bwd_multiplier);
  return p;
}

PipelineModel make_colocated_pipeline(int ranks, double bwd_multiplier) {
  if (ranks < 1) throw_invalid("make_colocated_pipeline: ranks must be at least 1");
  PipelineModel p;
  std::vector<double> even(ranks, 1.0);
  append_stages(p, even, ComponentKind::kEncoder, "encoder", bwd_multiplier);
  append_stages(p, even, ComponentKind::kLlm, "llm", bwd_multiplier);
  for (int r = 0; r < ranks; ++r) p.stages[ranks + r].rank = r;
  return p;
}

double ExecMicrobatch::encoder_workload() const {
  double w = 0.0;
  for (const auto& s : encoder_samples) w += s.work.encoder;
  return w;
}

double ExecMicrobatch::llm_workload() const {
  double w = 0.0;
  for (const auto& s : llm_samples) w += s.work.llm;
  return w;
}

bool ExecutionPlan::has_deferral() const {
  return std::any_of(microbatches.begin(), microbatches.end(),
                     [](const ExecMicrobatch& m) { return !m.deferred_out.empty(); });
}

ExecutionPlan static_split(std::span<const WorkItem> samples, int k) {
  if (k < 1) throw_invalid("static_split: K must be at least 1");
  if (static_cast<std::size_t>(k) > samples.size()) {
    throw_invalid("static_split: more microbatches than samples");
  }
  ExecutionPlan plan;
  const std::size_t base = samples.size() / k, extra = samples.size() % k;
  std::size_t pos = 0;
  for (int i = 0; i < k; ++i) {
    std::size_t n = base + (static_cast<std::size_t>(i) < extra ? 1 : 0);
    ExecMicrobatch mb;
    mb.index = i;
    mb.encoder_samples.assign(samples.begin() + pos, samples.begin() + pos + n);
    mb.llm_samples = mb.encoder_samples;
    pos += n;
    plan.microbatches.push_back(std::move(mb));
    plan.order.push_back(i);
  }
  return plan;
}

ExecutionPlan to_execution_plan(const MicrobatchPlan& src) {
  ExecutionPlan plan;
  plan.order = src.deferral.order;
  const int k = static_cast<int>(src.encoder.size());
  plan.microbatches.resize(k);
  for (int i = 0; i < k; ++i) {
    ExecMicrobatch& mb = plan.microbatches[i];
    mb.index = i;
    mb.encoder_samples = src.encoder[i].samples;
    auto it = src.deferral.deferred.find(i);
    if (it != src.deferral.deferred.end()) {
      mb.deferred_out = it->second;
      mb.partner = src.partner[i];
    }
  }
  for (int i = 0; i < k; ++i) {
    const ExecMicrobatch& mb = plan.microbatches[i];
    std::unordered_set<SampleId> out(mb.deferred_out.begin(), mb.deferred_out.end());
    for (const auto& s : mb.encoder_samples) {
      if (out.count(s.sample.id)) {
        plan.microbatches[mb.partner].llm_samples.push_back(s);
      } else {
        plan.microbatches[i].llm_samples.push_back(s);
      }
    }
  }
  // Own samples first, then the incoming deferred ones.
  for (auto& mb : plan.microbatches) {
    std::stable_partition(mb.llm_samples.begin(), mb.llm_samples.end(), [&](const WorkItem& w) {
      return std::any_of(mb.encoder_samples.begin(), mb.encoder_samples.end(),
                         [&](const WorkItem& e) { return e.sample.id == w.sample.id; });
    });
  }
  return plan;
}

ExecutionPlan heavy_light_order(const ExecutionPlan& plan) {
  std::vector<int> sorted(plan.order);
  auto total = [&](int i) {
    return plan.microbatches[i].encoder_workload() + plan.microbatches[i].llm_workload();
  };
  std::stable_sort(sorted.begin(), sorted.end(), [&](int a, int b) {
    double ta = total(a), tb = total(b);
    if (ta != tb) return ta > tb;
    return a < b;
  });
  ExecutionPlan out = plan;
  out.order.clear();
  std::size_t lo = 0, hi = sorted.size();
  bool heavy = true;
  while (lo < hi) {
    out.order.push_back(heavy ? sorted[lo++] : sorted[--hi]);
    heavy = !heavy;
  }
  return out;
}

namespace {

constexpr int kNone = -1;

struct Op {
  int rank = 0;
  int stage = 0;
  int microbatch = 0;
  Phase phase = Phase::kEncFwd;
  Subset subset = Subset::kFull;
  double duration = 0.0;
  double alloc_bytes = 0.0;  // at start
  double free_bytes = 0.0;   // at end
  std::vector<int> deps;
  std::vector<SampleId> samples;
  double start = 0.0;
  double end = 0.0;
};

// Operations of one replica plus lookup tables by (stage, microbatch).
class OpGraph {
 public:
  OpGraph(const PipelineModel& pipeline, const ExecutionPlan& plan, bool split_backward)
      : pipeline_(pipeline), plan_(plan) {
    const int n_stages = static_cast<int>(pipeline.stages.size());
    const int k = static_cast<int>(plan.microbatches.size());
    if (pipeline.llm_stage_count() == 0) throw_invalid("simulator: pipeline has no LLM stages");
    for (int s = 0; s < n_stages; ++s) {
      bool enc = pipeline.stages[s].is_encoder_stage();
      if (s > 0 && enc && !pipeline.stages[s - 1].is_encoder_stage()) {
        throw_invalid("simulator: encoder stages must precede LLM stages");
      }
    }
    check_plan(k);
    n_enc_ = pipeline.encoder_stage_count();
    fwd_.assign(n_stages, std::vector<int>(k, kNone));
    bwd_.assign(n_stages, std::vector<int>(k, kNone));
    bwd_deferred_.assign(n_stages, std::vector<int>(k, kNone));

    for (int s = 0; s < n_stages; ++s) {
      const StageModel& st = pipeline.stages[s];
      for (int m = 0; m < k; ++m) {
        const ExecMicrobatch& mb = plan.microbatches[m];
        if (st.is_encoder_stage()) {
          std::vector<const WorkItem*> all, own, out;
          std::unordered_set<SampleId> deferred(mb.deferred_out.begin(), mb.deferred_out.end());
          for (const auto& w : mb.encoder_samples) {
            all.push_back(&w);
            (deferred.count(w.sample.id) ? out : own).push_back(&w);
          }
          fwd_[s][m] = add(s, m, Phase::kEncFwd, Subset::kFull, all, true);
          if (split_backward && !out.empty()) {
            bwd_[s][m] = add(s, m, Phase::kEncBwd, Subset::kNonDeferredPart, own, false);
            bwd_deferred_[s][m] = add(s, m, Phase::kEncBwd, Subset::kDeferredPart, out, false);
          } else {
            bwd_[s][m] = add(s, m, Phase::kEncBwd, Subset::kFull, all, false);
          }
        } else {
          std::vector<const WorkItem*> items;
          for (const auto& w : mb.llm_samples) items.push_back(&w);
          fwd_[s][m] = add(s, m, Phase::kLlmFwd, Subset::kFull, items, true);
          bwd_[s][m] = add(s, m, Phase::kLlmBwd, Subset::kFull, items, false);
        }
      }
    }
    wire_dependencies(split_backward);
  }

  std::vector<Op>& ops() { return ops_; }
  int fwd(int s, int m) const { return fwd_[s][m]; }
  int bwd(int s, int m) const { return bwd_[s][m]; }
  int bwd_deferred(int s, int m) const { return bwd_deferred_[s][m]; }
  int encoder_stages() const { return n_enc_; }

 private:
  void check_plan(int k) const {
    std::vector<int> seen(k, 0);
    for (int m : plan_.order) {
      if (m < 0 || m >= k) throw_invalid("simulator: order references unknown microbatch");
      ++seen[m];
    }
    if (std::any_of(seen.begin(), seen.end(), [](int c) { return c != 1; })) {
      throw_invalid("simulator: order must be a permutation of the microbatches");
    }
    for (int m = 0; m < k; ++m) {
      const ExecMicrobatch& mb = plan_.microbatches[m];
      if (mb.index != m) throw_invalid("simulator: microbatches must be indexed 0..K-1");
      if (mb.deferred_out.empty()) continue;
      if (mb.partner < 0 || mb.partner >= k || mb.partner == m) {
        throw_invalid("simulator: deferral without a valid partner");
      }
    }
  }

  int add(int s, int m, Phase phase, Subset subset, const std::vector<const WorkItem*>& items,
          bool forward) {
    const StageModel& st = pipeline_.stages[s];
    Op op;
    op.rank = st.rank;
    op.stage = s;
    op.microbatch = m;
    op.phase = phase;
    op.subset = subset;
    double work = 0.0, tokens = 0.0;
    for (const auto* w : items) {
      op.samples.push_back(w->sample.id);
      if (st.is_encoder_stage()) {
        work += w->work.encoder;
        tokens += static_cast<double>(w->sample.encoder_tokens);
      } else {
        work += w->work.llm;
        tokens += llm_tokens(w->sample, pipeline_.mapping);
      }
    }
    op.duration = forward ? st.fwd_cost(work) : st.bwd_cost(work);
    (forward ? op.alloc_bytes : op.free_bytes) = tokens * pipeline_.bytes_per_token;
    ops_.push_back(std::move(op));
    return static_cast<int>(ops_.size()) - 1;
  }

  void wire_dependencies(bool split_backward) {
    const int n_stages = static_cast<int>(pipeline_.stages.size());
    const int k = static_cast<int>(plan_.microbatches.size());
    const int last = n_stages - 1;
    for (int m = 0; m < k; ++m) {
      for (int s = 1; s < n_stages; ++s) ops_[fwd_[s][m]].deps.push_back(fwd_[s - 1][m]);
      ops_[bwd_[last][m]].deps.push_back(fwd_[last][m]);
      for (int s = last - 1; s >= 0; --s) {
        ops_[bwd_[s][m]].deps.push_back(bwd_[s + 1][m]);
        if (bwd_deferred_[s][m] == kNone) continue;
        int partner = plan_.microbatches[m].partner;
        if (s == n_enc_ - 1) {
          ops_[bwd_deferred_[s][m]].deps.push_back(bwd_[s + 1][partner]);
        } else {
          ops_[bwd_deferred_[s][m]].deps.push_back(bwd_deferred_[s + 1][m]);
        }
      }
      // Deferred samples' encoder output feeds the partner's first LLM stage.
      const ExecMicrobatch& mb = plan_.microbatches[m];
      if (n_enc_ > 0 && !mb.deferred_out.empty()) {
        ops_[fwd_[n_enc_][mb.partner]].deps.push_back(fwd_[n_enc_ - 1][m]);
        if (!split_backward) {
          ops_[bwd_[n_enc_ - 1][m]].deps.push_back(bwd_[n_enc_][mb.partner]);
        }
      }
    }
  }

  const PipelineModel& pipeline_;
  const ExecutionPlan& plan_;
  int n_enc_ = 0;
  std::vector<Op> ops_;
  std::vector<std::vector<int>> fwd_, bwd_, bwd_deferred_;
};

// Runs per-rank programs in order. Every op appears in exactly one program.
void execute(std::vector<Op>& ops, const std::vector<std::vector<int>>& programs, double hop) {
  std::vector<std::size_t> pc(programs.size(), 0);
  std::vector<double> rank_free(programs.size(), 0.0);
  std::vector<char> done(ops.size(), 0);
  std::size_t remaining = 0;
  for (const auto& p : programs) remaining += p.size();
  if (remaining != ops.size()) throw_invariant("simulator: programs do not cover every op");

  while (remaining > 0) {
    bool progress = false;
    for (std::size_t r = 0; r < programs.size(); ++r) {
      while (pc[r] < programs[r].size()) {
        Op& op = ops[programs[r][pc[r]]];
        double ready = rank_free[r];
        bool blocked = false;
        for (int d : op.deps) {
          if (!done[d]) {
            blocked = true;
            break;
          }
          double t = ops[d].end + (ops[d].rank != op.rank ? hop : 0.0);
          ready = std::max(ready, t);
        }
        if (blocked) break;
        op.start = ready;
        op.end = ready + op.duration;
        rank_free[r] = op.end;
        done[programs[r][pc[r]]] = 1;
        ++pc[r];
        --remaining;
        progress = true;
      }
    }
    if (!progress) throw_invariant("simulator: dependency deadlock");
  }
}

// Per-rank program of a 1F1B-style stage: `warm` forwards, then one backward
// unit followed by the next forward, then the remaining units.
std::vector<int> one_f_one_b(const std::vector<int>& forwards,
                             const std::vector<std::vector<int>>& units, int warm) {
  std::vector<int> prog;
  const int k = static_cast<int>(forwards.size());
  warm = std::clamp(warm, std::min(1, k), k);
  for (int i = 0; i < warm; ++i) prog.push_back(forwards[i]);
  for (std::size_t i = 0; i < units.size(); ++i) {
    prog.insert(prog.end(), units[i].begin(), units[i].end());
    std::size_t next = static_cast<std::size_t>(warm) + i;
    if (next < forwards.size()) prog.push_back(forwards[next]);
  }
  return prog;
}

struct MemEvent {
  double time;
  int kind;  // 0 free, 1 alloc: frees first at equal times
  double delta;
};

ScheduleTrace finish_trace(const std::string& name, const PipelineModel& pipeline,
                           const ExecutionPlan& plan, const std::vector<Op>& ops,
                           std::vector<DeferredBuffer> buffers) {
  ScheduleTrace t;
  t.schedule = name;
  t.ranks = pipeline.rank_count();
  for (const auto& s : pipeline.stages) t.stages.push_back({s.stage_id, s.kind, s.rank});
  std::vector<int> idx(ops.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (ops[a].start != ops[b].start) return ops[a].start < ops[b].start;
    return ops[a].rank < ops[b].rank;
  });
  double first = std::numeric_limits<double>::infinity(), last = -first, busy = 0.0;
  const std::size_t k = plan.microbatches.size();
  t.encoder_fwd_times.assign(k, 0.0);
  t.llm_fwd_times.assign(k, 0.0);
  std::vector<std::vector<MemEvent>> mem(t.ranks);
  for (int i : idx) {
    const Op& op = ops[i];
    t.events.push_back({op.rank, op.stage, op.microbatch, op.subset, op.phase, op.start, op.end,
                        op.samples});
    first = std::min(first, op.start);
    last = std::max(last, op.end);
    busy += op.end - op.start;
    if (op.phase == Phase::kEncFwd) t.encoder_fwd_times[op.microbatch] += op.duration;
    if (op.phase == Phase::kLlmFwd) t.llm_fwd_times[op.microbatch] += op.duration;
    if (op.alloc_bytes > 0.0) mem[op.rank].push_back({op.start, 1, op.alloc_bytes});
    if (op.free_bytes > 0.0) mem[op.rank].push_back({op.end, 0, -op.free_bytes});
  }
  for (const auto& b : buffers) {
    mem[b.rank].push_back({b.start, 1, b.bytes});
    mem[b.rank].push_back({b.end, 0, -b.bytes});
  }
  t.deferred_buffers = std::move(buffers);
  t.iteration_time = ops.empty() ? 0.0 : last - first;
  t.bubble_fraction = t.iteration_time > 0.0
                          ? 1.0 - busy / (static_cast<double>(t.ranks) * t.iteration_time)
                          : 0.0;
  t.bubble_fraction = std::max(0.0, t.bubble_fraction);

  t.memory.resize(t.ranks);
  t.peak_memory.assign(t.ranks, 0.0);
  for (int r = 0; r < t.ranks; ++r) {
    auto& ev = mem[r];
    std::stable_sort(ev.begin(), ev.end(), [](const MemEvent& a, const MemEvent& b) {
      if (a.time != b.time) return a.time < b.time;
      return a.kind < b.kind;
    });
    double bytes = 0.0;
    for (std::size_t i = 0; i < ev.size(); ++i) {
      bytes += ev[i].delta;
      if (std::fabs(bytes) < 1e-6) bytes = 0.0;
      if (i + 1 < ev.size() && ev[i + 1].time == ev[i].time) continue;
      t.memory[r].push_back({ev[i].time, bytes});
      t.peak_memory[r] = std::max(t.peak_memory[r], bytes);
    }
  }
  return t;
}

ScheduleTrace simulate_pipelined(const std::string& name, const PipelineModel& pipeline,
                                 const ExecutionPlan& plan, int cap) {
  const int n_stages = static_cast<int>(pipeline.stages.size());
  if (pipeline.rank_count() != n_stages) {
    throw_invalid("simulator: pipelined schedules need one stage per rank");
  }
  OpGraph g(pipeline, plan, true);
  const int n_enc = g.encoder_stages();
  const int k = static_cast<int>(plan.order.size());

  std::vector<std::vector<int>> programs(n_stages);
  for (int s = 0; s < n_stages; ++s) {
    std::vector<int> forwards;
    std::vector<std::vector<int>> units(k);
    for (int i = 0; i < k; ++i) {
      int m = plan.order[i];
      forwards.push_back(g.fwd(s, m));
      if (i > 0 && g.bwd_deferred(s, plan.order[i - 1]) != kNone) {
        units[i].push_back(g.bwd_deferred(s, plan.order[i - 1]));
      }
      units[i].push_back(g.bwd(s, m));
    }
    if (k > 0 && g.bwd_deferred(s, plan.order[k - 1]) != kNone) {
      units[k - 1].push_back(g.bwd_deferred(s, plan.order[k - 1]));
    }
    // Extra warm-up forwards only pay off where split backward work lands
    // later, i.e. on encoder stages; LLM stages keep the 1F1B depth.
    int warm = pipeline.stages[s].is_encoder_stage() ? cap - s : n_stages - s;
    programs[pipeline.stages[s].rank] = one_f_one_b(forwards, units, warm);
  }
  auto& ops = g.ops();
  execute(ops, programs, pipeline.hop_latency);

  std::vector<DeferredBuffer> buffers;
  if (n_enc > 0) {
    for (const auto& mb : plan.microbatches) {
      if (mb.deferred_out.empty()) continue;
      std::unordered_set<SampleId> out(mb.deferred_out.begin(), mb.deferred_out.end());
      double tokens = 0.0;
      for (const auto& w : mb.encoder_samples) {
        if (out.count(w.sample.id)) {
          tokens += pipeline.mapping.encoder_to_llm * static_cast<double>(w.sample.encoder_tokens);
        }
      }
      DeferredBuffer b;
      b.rank = pipeline.stages[n_enc].rank;
      b.microbatch = mb.index;
      b.partner = mb.partner;
      b.start = ops[g.fwd(n_enc, mb.index)].start;
      b.end = ops[g.fwd(n_enc, mb.partner)].start;
      b.bytes = tokens * pipeline.bytes_per_token;
      buffers.push_back(b);
    }
  }
  return finish_trace(name, pipeline, plan, ops, std::move(buffers));
}

}  // namespace

ScheduleTrace simulate_1f1b(const PipelineModel& pipeline, const ExecutionPlan& plan) {
  return simulate_pipelined("1f1b", pipeline, plan, static_cast<int>(pipeline.stages.size()));
}

ScheduleTrace simulate_entrain(const PipelineModel& pipeline, const ExecutionPlan& plan,
                               int inflight_cap) {
  const int depth = static_cast<int>(pipeline.stages.size());
  int cap = inflight_cap == 0 ? depth + 2 : inflight_cap;
  if (cap < depth) {
    throw_infeasible("in-flight cap " + std::to_string(cap) + " is below the pipeline depth " +
                     std::to_string(depth));
  }
  return simulate_pipelined("entrain", pipeline, plan, cap);
}

ScheduleTrace simulate_disttrain(const PipelineModel& pipeline, const ExecutionPlan& plan) {
  return simulate_pipelined("disttrain", pipeline, heavy_light_order(plan),
                            static_cast<int>(pipeline.stages.size()));
}

ScheduleTrace simulate_dip(const PipelineModel& colocated, const ExecutionPlan& plan) {
  const int ranks = colocated.rank_count();
  const int n_enc = colocated.encoder_stage_count();
  if (n_enc != ranks || colocated.llm_stage_count() != ranks) {
    throw_invalid("simulate_dip: every rank must host one encoder and one LLM stage");
  }
  for (int r = 0; r < ranks; ++r) {
    if (colocated.stages[r].rank != r || colocated.stages[ranks + r].rank != r) {
      throw_invalid("simulate_dip: stage i and stage ranks+i must both live on rank i");
    }
  }
  OpGraph g(colocated, plan, false);
  auto& ops = g.ops();
  const int k = static_cast<int>(plan.order.size());
  if (k == 0) return finish_trace("dip", colocated, plan, ops, {});

  // Encoder backward waits for the whole LLM phase, which ends with the
  // first LLM stage's backward of the last microbatch.
  const int llm_done = g.bwd(n_enc, plan.order[k - 1]);
  std::vector<std::vector<int>> programs(ranks);
  for (int r = 0; r < ranks; ++r) {
    const int enc = r, llm = ranks + r;
    std::vector<int>& prog = programs[r];
    for (int m : plan.order) prog.push_back(g.fwd(enc, m));
    std::vector<int> forwards;
    std::vector<std::vector<int>> units;
    for (int m : plan.order) {
      forwards.push_back(g.fwd(llm, m));
      units.push_back({g.bwd(llm, m)});
    }
    auto llm_prog = one_f_one_b(forwards, units, ranks - r);
    prog.insert(prog.end(), llm_prog.begin(), llm_prog.end());
    for (int m : plan.order) {
      int op = g.bwd(enc, m);
      if (op != llm_done) ops[op].deps.push_back(llm_done);
      prog.push_back(op);
    }
  }
  execute(ops, programs, colocated.hop_latency);
  return finish_trace("dip", colocated, plan, ops, {});
}

}  // namespace mmpipe
