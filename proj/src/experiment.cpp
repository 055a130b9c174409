// Copyright 2026 The mmpipe Authors.
// SPDX-License-Identifier: Apache-2.0

#include "mmpipe/experiment.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mmpipe/error.h"

namespace mmpipe {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw_invalid("cannot open '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw_invalid("cannot write '" + path.string() + "'");
  out << text;
}

fs::path prepare_dir(const std::string& dir) {
  fs::path p(dir.empty() ? "." : dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw_invalid("cannot create output directory '" + p.string() + "'");
  return p;
}

std::string resolve(const std::string& base, const std::string& path) {
  fs::path p(path);
  if (p.is_absolute()) return p.string();
  return (fs::path(base) / p).lexically_normal().string();
}

DistributionSpec parse_distribution(const json& j) {
  DistributionSpec d;
  std::string family = j.value("family", "lognormal");
  if (family == "lognormal") {
    d.family = DistributionFamily::kLogNormal;
  } else if (family == "uniform") {
    d.family = DistributionFamily::kUniform;
  } else if (family == "bimodal") {
    d.family = DistributionFamily::kBimodal;
  } else {
    throw_invalid("unknown distribution family '" + family + "'");
  }
  d.location = j.value("location", d.location);
  d.scale = j.value("scale", d.scale);
  d.location2 = j.value("location2", d.location2);
  d.scale2 = j.value("scale2", d.scale2);
  d.weight = j.value("weight", d.weight);
  return d;
}

Quadratic parse_quadratic(const json& j) {
  if (!j.is_array() || j.size() != 3) throw_invalid("quadratic must be [a, b, c]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

ScalingClass parse_scaling(const std::string& s) {
  if (s == "quadratic") return ScalingClass::kQuadratic;
  if (s == "linear") return ScalingClass::kLinear;
  throw_invalid("unknown scaling class '" + s + "'");
}

ModelSpec parse_model(const json& j) {
  ModelSpec m;
  m.mapping.encoder_to_llm = j.value("encoder_to_llm", 1.0);
  if (!(m.mapping.encoder_to_llm >= 0.0)) throw_invalid("encoder_to_llm must be nonnegative");
  int next_id = 0;
  std::set<std::string> ids;
  std::set<int> layer_ids;
  for (const auto& c : j.at("components")) {
    ComponentSpec comp;
    comp.id = c.at("id").get<std::string>();
    if (!ids.insert(comp.id).second) throw_invalid("duplicate component id '" + comp.id + "'");
    std::string kind = c.at("kind").get<std::string>();
    if (kind == "encoder") {
      comp.kind = ComponentKind::kEncoder;
    } else if (kind == "llm") {
      comp.kind = ComponentKind::kLlm;
    } else {
      throw_invalid("unknown component kind '" + kind + "'");
    }
    ScalingClass scaling = parse_scaling(c.value("scaling", "quadratic"));
    double param_bytes = c.value("param_bytes", 0.0);
    const json& layers = c.at("layers");
    if (layers.is_number_integer()) {
      int n = layers.get<int>();
      if (n < 1) throw_invalid("component '" + comp.id + "' needs at least one layer");
      for (int i = 0; i < n; ++i) comp.layers.push_back({next_id++, comp.id, scaling, param_bytes});
    } else {
      for (const auto& l : layers) {
        LayerSpec spec{l.value("layer_id", next_id), comp.id,
                       parse_scaling(l.value("scaling", c.value("scaling", "quadratic"))),
                       l.value("param_bytes", param_bytes)};
        next_id = std::max(next_id, spec.layer_id + 1);
        comp.layers.push_back(spec);
      }
      if (comp.layers.empty()) throw_invalid("component '" + comp.id + "' has no layers");
    }
    for (const auto& l : comp.layers) {
      if (!layer_ids.insert(l.layer_id).second) {
        throw_invalid("duplicate layer id " + std::to_string(l.layer_id));
      }
    }
    m.components.push_back(std::move(comp));
  }
  if (m.components.empty()) throw_invalid("model has no components");
  return m;
}

std::vector<Degrees> default_degrees(int n_total) {
  std::vector<Degrees> out;
  for (int tp = 1; tp <= n_total; tp *= 2) {
    for (int cp = 1; tp * cp <= n_total; cp *= 2) out.push_back({tp, cp});
  }
  return out;
}

int component_index(const ModelSpec& m, ComponentKind kind) {
  for (std::size_t i = 0; i < m.components.size(); ++i) {
    if (m.components[i].kind == kind) return static_cast<int>(i);
  }
  return -1;
}

std::vector<double> representative_tokens(const ModelSpec& model,
                                          const std::vector<Sample>& dataset, int mu) {
  std::vector<double> out;
  for (const auto& comp : model.components) {
    double sum = 0.0;
    for (const auto& s : dataset) sum += model.input_tokens(comp, s);
    out.push_back(sum / static_cast<double>(dataset.size()) * mu);
  }
  return out;
}

json config_to_json(const ParallelConfig& c) {
  json comps = json::array();
  for (std::size_t i = 0; i < c.components.size(); ++i) {
    json stages = json::array();
    for (const auto& [a, b] : c.partitions[i].stages) stages.push_back({a, b});
    comps.push_back({{"tp", c.components[i].tp},
                     {"cp", c.components[i].cp},
                     {"pp", c.components[i].pp},
                     {"stages", stages},
                     {"stage_latencies", c.partitions[i].latencies}});
  }
  return {{"dp", c.dp},
          {"allocation", to_string(c.allocation)},
          {"components", comps},
          {"microbatches", c.microbatches},
          {"reshard_ms", c.reshard},
          {"memory_per_rank", c.memory_per_rank},
          {"predicted_iteration_time", c.predicted_iteration_time},
          {"predicted_throughput", c.predicted_throughput}};
}

bool is_approximate(const std::string& schedule) {
  return schedule == "disttrain" || schedule == "dip";
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& json_text, const std::string& base_dir) {
  ExperimentConfig cfg;
  try {
    json j = json::parse(json_text);
    cfg.seed = j.value("seed", std::uint64_t{0});

    const json& ds = j.at("dataset");
    if (ds.contains("path")) cfg.dataset_path = resolve(base_dir, ds.at("path").get<std::string>());
    if (ds.contains("synthetic")) {
      const json& s = ds.at("synthetic");
      DatasetSpec spec;
      spec.n_samples = s.at("n_samples").get<std::int64_t>();
      spec.encoder = parse_distribution(s.at("encoder"));
      spec.text = parse_distribution(s.at("text"));
      spec.seed = s.value("seed", cfg.seed);
      cfg.synthetic = spec;
    }
    if (!cfg.dataset_path && !cfg.synthetic) {
      throw_invalid("dataset needs either 'path' or 'synthetic'");
    }

    cfg.model = parse_model(j.at("model"));

    if (j.contains("cluster")) {
      const json& c = j.at("cluster");
      cfg.cluster.n_total = c.value("n_total", cfg.cluster.n_total);
      cfg.cluster.vram_per_gpu = c.value("vram_per_gpu", cfg.cluster.vram_per_gpu);
      cfg.cluster.reshard_bandwidth = c.value("reshard_bandwidth", cfg.cluster.reshard_bandwidth);
      cfg.cluster.bytes_per_token_activation =
          c.value("bytes_per_token_activation", cfg.cluster.bytes_per_token_activation);
    }
    validate(cfg.cluster);

    if (j.contains("cost_model")) {
      const json& cm = j.at("cost_model");
      if (cm.contains("path")) cfg.cost_model_path = resolve(base_dir, cm.at("path").get<std::string>());
      if (cm.contains("reference")) {
        const json& r = cm.at("reference");
        if (r.contains("quadratic")) cfg.reference.params.quadratic_layer = parse_quadratic(r.at("quadratic"));
        if (r.contains("linear")) cfg.reference.params.linear_layer = parse_quadratic(r.at("linear"));
        cfg.reference.params.per_rank_overhead =
            r.value("per_rank_overhead", cfg.reference.params.per_rank_overhead);
        if (r.contains("degrees")) {
          for (const auto& d : r.at("degrees")) {
            cfg.reference.degrees.push_back({d.at(0).get<int>(), d.at(1).get<int>()});
          }
        }
      }
    }

    if (j.contains("planner")) {
      const json& p = j.at("planner");
      PlannerParams& pl = cfg.planner;
      pl.alpha = p.value("alpha", pl.alpha);
      pl.p_error = p.value("p_error", pl.p_error);
      pl.n0 = p.value("n0", pl.n0);
      pl.max_batch = p.value("max_batch", pl.max_batch);
      pl.mu = p.value("mu", pl.mu);
      pl.b_global = p.value("b_global", pl.b_global);
      if (p.contains("dp") && !p.at("dp").is_null()) pl.dp = p.at("dp").get<int>();
      if (p.contains("b_min") && !p.at("b_min").is_null()) pl.b_min = p.at("b_min").get<int>();
    }
    if (cfg.planner.mu < 1 || cfg.planner.b_global < 1 || cfg.planner.n0 < 1) {
      throw_invalid("planner: mu, b_global and n0 must be positive");
    }

    if (j.contains("run")) {
      const json& r = j.at("run");
      RunParams& rp = cfg.run;
      rp.iterations = r.value("iterations", rp.iterations);
      if (r.contains("schedules")) rp.schedules = r.at("schedules").get<std::vector<std::string>>();
      if (r.contains("k") && !r.at("k").is_null()) rp.k = r.at("k").get<int>();
      rp.deferral = r.value("deferral", rp.deferral);
      rp.defer_noncritical = r.value("defer_noncritical", rp.defer_noncritical);
      rp.resolution_fraction = r.value("resolution_fraction", rp.resolution_fraction);
      rp.inflight_cap = r.value("inflight_cap", rp.inflight_cap);
      rp.bwd_multiplier = r.value("bwd_multiplier", rp.bwd_multiplier);
      rp.hop_latency = r.value("hop_latency", rp.hop_latency);
      rp.trace_iterations = r.value("trace_iterations", rp.trace_iterations);
    }
    for (const auto& s : cfg.run.schedules) {
      if (s != "1f1b" && s != "disttrain" && s != "dip" && s != "entrain") {
        throw_invalid("unknown schedule '" + s + "'");
      }
    }
    if (cfg.run.iterations < 1) throw_invalid("run: iterations must be positive");

    if (j.contains("pipeline")) {
      const json& p = j.at("pipeline");
      cfg.fixed_dp = p.at("dp").get<int>();
      for (const auto& c : p.at("components")) {
        cfg.fixed_components.push_back({c.value("tp", 1), c.value("cp", 1), c.value("pp", 1)});
      }
      if (cfg.fixed_components.size() != cfg.model.components.size()) {
        throw_invalid("pipeline: one entry per model component required");
      }
    }
  } catch (const json::exception& e) {
    throw_invalid(std::string("config: ") + e.what());
  }
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::string base = fs::path(path).parent_path().string();
  return parse_experiment_config(read_file(path), base.empty() ? "." : base);
}

std::vector<Sample> load_dataset(const ExperimentConfig& config) {
  std::vector<Sample> out;
  if (config.dataset_path) {
    std::ifstream in(*config.dataset_path);
    if (!in) throw_invalid("cannot open dataset '" + *config.dataset_path + "'");
    out = read_dataset_jsonl(in);
  } else {
    out = generate_synthetic_dataset(*config.synthetic);
  }
  validate_dataset(out);
  if (out.empty()) throw_invalid("dataset is empty");
  return out;
}

LayerCostModel load_cost_model(const ExperimentConfig& config) {
  if (config.cost_model_path) return cost_model_from_json(read_file(*config.cost_model_path));
  std::vector<Degrees> grid = config.reference.degrees;
  if (grid.empty()) grid = default_degrees(config.cluster.n_total);
  return make_reference_cost_model(config.model, grid, config.reference.params);
}

ParallelConfig evaluate_fixed_config(const ExperimentConfig& config,
                                     const std::vector<Sample>& dataset,
                                     const LayerCostModel& costs) {
  if (!config.fixed_dp) throw_invalid("no fixed pipeline configured");
  const int dp = *config.fixed_dp;
  const int mu = config.planner.mu;
  if (dp < 1) throw_invalid("pipeline: dp must be positive");
  if (config.planner.b_global % (dp * mu) != 0) {
    throw_invalid("pipeline: b_global is not divisible by dp * mu");
  }
  ParallelConfig cfg;
  cfg.dp = dp;
  cfg.microbatches = config.planner.b_global / (dp * mu);
  cfg.components = config.fixed_components;
  std::vector<double> rep = representative_tokens(config.model, dataset, mu);
  for (std::size_t i = 0; i < cfg.components.size(); ++i) {
    const auto& par = cfg.components[i];
    const auto& comp = config.model.components[i];
    if (par.tp < 1 || par.cp < 1 || par.pp < 1) throw_invalid("pipeline: degrees must be positive");
    if (par.pp > static_cast<int>(comp.layers.size())) {
      throw_invalid("pipeline: pp exceeds the layer count of '" + comp.id + "'");
    }
    if (!costs.covers(comp.layers, {par.tp, par.cp})) {
      throw_invalid("pipeline: cost model lacks degrees of '" + comp.id + "'");
    }
    cfg.allocation.gpus.push_back(par.gpus());
    cfg.partitions.push_back(intra_module_balance(comp.layers, par.pp, {par.tp, par.cp}, costs,
                                                  rep[i], 1.0 + config.run.bwd_multiplier));
  }
  if (cfg.allocation.total() * dp > config.cluster.n_total) {
    throw_infeasible("pipeline: configuration needs more GPUs than the cluster has");
  }
  double enc_tokens = 0.0;
  for (const auto& s : dataset) enc_tokens += static_cast<double>(s.encoder_tokens);
  double boundary = config.model.mapping.encoder_to_llm * enc_tokens /
                    static_cast<double>(dataset.size()) * mu;
  cfg.memory_per_rank = memory_estimate(cfg, config.model, MemoryModel{3.0, rep}, config.cluster);
  cfg.reshard = reshard_cost(cfg, cfg.microbatches, boundary, config.cluster);
  cfg.predicted_iteration_time = schedule_iteration_time(cfg.microbatches, cfg.partitions, cfg.reshard);
  cfg.predicted_throughput = 1000.0 * dp * cfg.microbatches * mu / cfg.predicted_iteration_time;
  return cfg;
}

PlanReport plan_experiment(const ExperimentConfig& config, const std::vector<Sample>& dataset,
                           const LayerCostModel& costs) {
  PlanReport report;
  WorkloadTable table = WorkloadTable::from_dataset(costs, config.model, dataset);
  const int profile_dp = config.planner.dp.value_or(config.fixed_dp.value_or(1));
  if (config.planner.b_min) {
    report.b_min = *config.planner.b_min;
  } else {
    ProfilingOptions opt;
    opt.alpha = config.planner.alpha;
    opt.p_error = config.planner.p_error;
    opt.n0 = config.planner.n0;
    opt.max_batch = config.planner.max_batch;
    opt.full_trial_log = true;
    report.profiling = find_min_stable_batch(opt, config.cluster, profile_dp, table, config.seed);
    report.b_min = report.profiling->b_min;
  }
  if (table.components() == 2 && config.cluster.n_total / profile_dp >= 2) {
    report.bound = termination_bound(table, config.cluster.n_total / profile_dp);
  }
  if (config.planner.b_global < report.b_min) {
    report.warnings.push_back("global batch " + std::to_string(config.planner.b_global) +
                              " is below the stable profiling batch " +
                              std::to_string(report.b_min) +
                              "; load balance is not guaranteed");
  }
  SearchOptions so;
  so.b_min = std::min(report.b_min, config.planner.b_global);
  so.b_global = config.planner.b_global;
  so.mu = config.planner.mu;
  so.dp = config.planner.dp;
  so.backward_multiplier = config.run.bwd_multiplier;
  if (config.fixed_dp) {
    report.search.best = evaluate_fixed_config(config, dataset, costs);
    report.search.proportions = estimate_macroscopic_proportions(table, so.b_min, config.seed);
    report.search.representative_tokens = representative_tokens(config.model, dataset, so.mu);
    report.search.candidates_evaluated = 1;
  } else {
    report.search = search_config(so, config.cluster, config.model, costs, dataset, config.seed);
  }
  return report;
}

RunReport run_experiment(const ExperimentConfig& config, const std::vector<Sample>& dataset,
                         const LayerCostModel& costs, const ParallelConfig& parallel) {
  const ModelSpec& model = config.model;
  const int enc = component_index(model, ComponentKind::kEncoder);
  const int llm = component_index(model, ComponentKind::kLlm);
  if (model.components.size() != 2 || enc < 0 || llm < 0) {
    throw_invalid("run: the simulator supports one encoder and one LLM component");
  }
  if (parallel.components.size() != 2 || parallel.partitions.size() != 2) {
    throw_invalid("run: parallel configuration does not match the model");
  }
  RunReport report;
  report.config = parallel;
  const int dp = parallel.dp;
  const int mu = config.planner.mu;
  const int k = config.run.k.value_or(parallel.microbatches);
  if (k < 1) throw_invalid("run: K must be positive");
  report.k = k;
  report.global_batch = dp * k * mu;
  if (static_cast<std::size_t>(report.global_batch) > dataset.size()) {
    throw_invalid("run: dataset is smaller than one global batch");
  }

  std::vector<Degrees> degrees(2);
  for (int i = 0; i < 2; ++i) degrees[i] = {parallel.components[i].tp, parallel.components[i].cp};
  const std::vector<WorkItem> items = compute_workloads(costs, model, dataset, degrees);

  PipelineModel pipe = make_pipeline(parallel.partitions[enc].latencies,
                                     parallel.partitions[llm].latencies, config.run.bwd_multiplier);
  pipe.hop_latency = config.run.hop_latency;
  pipe.bytes_per_token = config.cluster.bytes_per_token_activation;
  pipe.mapping = model.mapping;
  PipelineModel colocated = make_colocated_pipeline(static_cast<int>(pipe.stages.size()),
                                                    config.run.bwd_multiplier);
  colocated.hop_latency = pipe.hop_latency;
  colocated.bytes_per_token = pipe.bytes_per_token;
  colocated.mapping = pipe.mapping;

  AssignerOptions assign;
  assign.enable_deferral = config.run.deferral;
  assign.defer_noncritical = config.run.defer_noncritical;
  assign.resolution_fraction = config.run.resolution_fraction;

  const auto& names = config.run.schedules;
  report.schedules.resize(names.size());
  std::vector<std::vector<double>> pooled_enc(names.size()), pooled_llm(names.size());
  std::vector<double> std_enc_sum(names.size(), 0.0), std_llm_sum(names.size(), 0.0);
  std::vector<double> k_sum(names.size(), 0.0);
  for (std::size_t s = 0; s < names.size(); ++s) {
    report.schedules[s].schedule = names[s];
    report.schedules[s].approximate = is_approximate(names[s]);
  }

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> perm(items.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::size_t cursor = 0;

  const std::size_t per_replica = static_cast<std::size_t>(k * mu);
  for (int it = 0; it < config.run.iterations; ++it) {
    if (cursor + report.global_batch > perm.size()) {
      std::shuffle(perm.begin(), perm.end(), rng);
      cursor = 0;
    }
    std::vector<WorkItem> draw;
    draw.reserve(report.global_batch);
    for (int i = 0; i < report.global_batch; ++i) draw.push_back(items[perm[cursor++]]);

    std::vector<Minibatch> balanced;
    bool need_balanced = std::find(names.begin(), names.end(), "entrain") != names.end();
    if (need_balanced) balanced = assign_to_replicas(draw, dp);

    for (std::size_t s = 0; s < names.size(); ++s) {
      const std::string& name = names[s];
      ScheduleSummary& sum = report.schedules[s];
      double t_iter = 0.0, busy = 0.0;
      int ranks = 0;
      for (int r = 0; r < dp; ++r) {
        ExecutionPlan plan;
        ScheduleTrace trace;
        if (name == "entrain") {
          MicrobatchPlan mp = build_plan(balanced[r], k, assign);
          if (it == 0) report.first_plans.push_back(mp);
          k_sum[s] += mp.k_eff;
          plan = to_execution_plan(mp);
          trace = simulate_entrain(pipe, plan, config.run.inflight_cap);
        } else {
          std::span<const WorkItem> slice(draw.data() + r * per_replica, per_replica);
          plan = static_split(slice, k);
          k_sum[s] += k;
          if (name == "1f1b") {
            trace = simulate_1f1b(pipe, plan);
          } else if (name == "disttrain") {
            trace = simulate_disttrain(pipe, plan);
          } else {
            trace = simulate_dip(colocated, plan);
          }
        }
        std::vector<std::string> problems = validate_trace(trace, plan);
        if (name == "entrain") {
          auto more = check_deferred_residency(trace);
          problems.insert(problems.end(), more.begin(), more.end());
        }
        sum.violations += static_cast<int>(problems.size());
        for (const auto& p : problems) {
          if (report.violation_samples.size() < 20) report.violation_samples.push_back(name + ": " + p);
        }

        TraceMetrics m = metrics(trace);
        t_iter = std::max(t_iter, trace.iteration_time);
        for (const auto& e : trace.events) busy += e.end - e.start;
        ranks += trace.ranks;
        std_enc_sum[s] += m.encoder_fwd_std;
        std_llm_sum[s] += m.llm_fwd_std;
        pooled_enc[s].insert(pooled_enc[s].end(), trace.encoder_fwd_times.begin(),
                             trace.encoder_fwd_times.end());
        pooled_llm[s].insert(pooled_llm[s].end(), trace.llm_fwd_times.begin(),
                             trace.llm_fwd_times.end());
        sum.max_peak_memory = std::max(sum.max_peak_memory, m.max_peak_memory);
        if (r == 0 && it < config.run.trace_iterations) {
          report.traces.push_back({it, name, std::move(trace), std::move(plan)});
        }
      }
      // Replicas wait for the slowest one; that wait counts as bubble.
      sum.iteration_times.push_back(t_iter);
      sum.bubble_fractions.push_back(t_iter > 0.0 ? std::max(0.0, 1.0 - busy / (ranks * t_iter)) : 0.0);
    }
  }

  const double runs = static_cast<double>(config.run.iterations) * dp;
  for (std::size_t s = 0; s < names.size(); ++s) {
    ScheduleSummary& sum = report.schedules[s];
    const double n = static_cast<double>(sum.iteration_times.size());
    sum.mean_iteration_time =
        std::accumulate(sum.iteration_times.begin(), sum.iteration_times.end(), 0.0) / n;
    sum.mean_bubble =
        std::accumulate(sum.bubble_fractions.begin(), sum.bubble_fractions.end(), 0.0) / n;
    sum.throughput = sum.mean_iteration_time > 0.0
                         ? 1000.0 * dp * k * mu / sum.mean_iteration_time
                         : 0.0;
    sum.encoder_std = std_enc_sum[s] / runs;
    sum.llm_std = std_llm_sum[s] / runs;
    sum.encoder_std_pooled = population_std(pooled_enc[s]);
    sum.llm_std_pooled = population_std(pooled_llm[s]);
    sum.mean_k = k_sum[s] / runs;
  }
  return report;
}

std::string plan_report_to_json(const PlanReport& report) {
  json j;
  j["b_min"] = report.b_min;
  if (report.profiling) {
    j["trials_per_round"] = report.profiling->trials;
    j["reference_allocation"] = to_string(report.profiling->reference);
    json log = json::array();
    for (const auto& round : report.profiling->log) {
      json seen = json::array();
      for (const auto& a : round.allocations_seen) seen.push_back(to_string(a));
      log.push_back({{"batch_size", round.batch_size},
                     {"trials_run", round.trials_run},
                     {"passed", round.passed},
                     {"reference", to_string(round.reference)},
                     {"allocations_seen", seen}});
    }
    j["trial_log"] = log;
  }
  if (report.bound) {
    j["termination_bound"] = {{"mean_ratio", report.bound->mean_ratio},
                              {"ratio_std", report.bound->ratio_std},
                              {"breakpoint_distance", report.bound->breakpoint_distance},
                              {"n_star_bound", report.bound->n_star_bound}};
  }
  j["proportions"] = report.search.proportions.fractions;
  j["representative_tokens"] = report.search.representative_tokens;
  j["candidates_evaluated"] = report.search.candidates_evaluated;
  j["candidates_skipped"] = report.search.candidates_skipped;
  j["config"] = config_to_json(report.search.best);
  j["warnings"] = report.warnings;
  return j.dump(2);
}

std::string run_report_to_json(const RunReport& report) {
  json schedules = json::object();
  for (const auto& s : report.schedules) {
    schedules[s.schedule] = {{"mean_iteration_time", s.mean_iteration_time},
                             {"throughput", s.throughput},
                             {"mean_bubble", s.mean_bubble},
                             {"encoder_std", s.encoder_std},
                             {"llm_std", s.llm_std},
                             {"encoder_std_pooled", s.encoder_std_pooled},
                             {"llm_std_pooled", s.llm_std_pooled},
                             {"max_peak_memory", s.max_peak_memory},
                             {"mean_k", s.mean_k},
                             {"violations", s.violations},
                             {"approximate", s.approximate}};
  }
  json j = {{"config", config_to_json(report.config)},
            {"k", report.k},
            {"global_batch", report.global_batch},
            {"iterations", report.schedules.empty() ? 0 : report.schedules[0].iteration_times.size()},
            {"schedules", schedules},
            {"violation_samples", report.violation_samples}};
  return j.dump(2);
}

void cmd_gen_dataset(const ExperimentConfig& config, const std::string& out_dir) {
  if (!config.synthetic) throw_invalid("gen-dataset: config has no synthetic dataset spec");
  std::vector<Sample> samples = generate_synthetic_dataset(*config.synthetic);
  fs::path dir = prepare_dir(out_dir);
  std::ostringstream os;
  write_dataset_jsonl(os, samples);
  write_file(dir / "dataset.jsonl", os.str());
}

void cmd_fit(const std::string& measurements_path, const std::string& out_dir) {
  std::ifstream in(measurements_path);
  if (!in) throw_invalid("cannot open measurements '" + measurements_path + "'");
  std::vector<Measurement> m = read_measurements_jsonl(in);
  LayerCostModel model = fit_cost_model(m);
  fs::path dir = prepare_dir(out_dir);
  write_file(dir / "cost_model.json", cost_model_to_json(model));
}

void cmd_plan(const ExperimentConfig& config, const std::string& out_dir) {
  std::vector<Sample> dataset = load_dataset(config);
  LayerCostModel costs = load_cost_model(config);
  PlanReport report = plan_experiment(config, dataset, costs);
  fs::path dir = prepare_dir(out_dir);
  write_file(dir / "plan_report.json", plan_report_to_json(report));
}

void cmd_run(const ExperimentConfig& config, const std::string& out_dir) {
  std::vector<Sample> dataset = load_dataset(config);
  LayerCostModel costs = load_cost_model(config);
  PlanReport plan = plan_experiment(config, dataset, costs);
  RunReport report = run_experiment(config, dataset, costs, plan.search.best);
  fs::path dir = prepare_dir(out_dir);
  write_file(dir / "plan_report.json", plan_report_to_json(plan));
  write_file(dir / "metrics.json", run_report_to_json(report));
  if (!report.first_plans.empty()) write_file(dir / "plan.json", plan_to_json(report.first_plans[0]));

  std::ostringstream iters;
  iters << "iteration,schedule,iteration_time,bubble_fraction\n";
  iters.precision(17);
  std::ostringstream table;
  table << "schedule,encoder_std,llm_std,encoder_std_pooled,llm_std_pooled\n";
  table.precision(17);
  for (const auto& s : report.schedules) {
    for (std::size_t i = 0; i < s.iteration_times.size(); ++i) {
      iters << i << ',' << s.schedule << ',' << s.iteration_times[i] << ','
            << s.bubble_fractions[i] << '\n';
    }
    table << s.schedule << ',' << s.encoder_std << ',' << s.llm_std << ','
          << s.encoder_std_pooled << ',' << s.llm_std_pooled << '\n';
  }
  write_file(dir / "iterations.csv", iters.str());
  write_file(dir / "std_table.csv", table.str());

  for (const auto& t : report.traces) {
    std::string stem = t.schedule + "_it" + std::to_string(t.iteration);
    std::ostringstream csv;
    write_trace_csv(csv, t.trace);
    write_file(dir / ("trace_" + stem + ".csv"), csv.str());
    write_file(dir / ("metrics_" + stem + ".json"), metrics_to_json(metrics(t.trace)));
  }
  if (!report.violation_samples.empty()) {
    throw_invariant("trace validation failed: " + report.violation_samples.front());
  }
}

void cmd_compare(const std::vector<std::string>& metrics_paths, const std::string& out_dir) {
  if (metrics_paths.empty()) throw_invalid("compare: no metrics files given");
  static const char* kFields[] = {"mean_iteration_time", "throughput", "mean_bubble",
                                  "encoder_std", "llm_std"};
  std::vector<json> runs;
  for (const auto& path : metrics_paths) {
    json j;
    try {
      j = json::parse(read_file(path));
    } catch (const json::exception& e) {
      throw_invalid("compare: '" + path + "' is not JSON");
    }
    if (!j.contains("schedules") || !j.at("schedules").is_object()) {
      throw_invalid("compare: '" + path + "' has no schedules object");
    }
    for (const auto& [name, s] : j.at("schedules").items()) {
      for (const char* f : kFields) {
        if (!s.contains(f) || !s.at(f).is_number()) {
          throw_invalid("compare: '" + path + "' schedule '" + name + "' lacks " + f);
        }
      }
    }
    runs.push_back(std::move(j));
  }

  auto ratio = [](double num, double den) -> json {
    if (den == 0.0) return num == 0.0 ? json(1.0) : json(nullptr);
    return num / den;
  };
  auto cell = [](const json& v) {
    if (v.is_null()) return std::string();
    std::ostringstream os;
    os.precision(17);
    os << v.get<double>();
    return os.str();
  };

  const json& ref = runs[0].at("schedules");
  std::ostringstream csv;
  csv << "run,schedule,mean_iteration_time,throughput,mean_bubble,encoder_std,llm_std,"
         "speedup,throughput_ratio,encoder_std_ratio,llm_std_ratio\n";
  json summary = {{"reference", metrics_paths[0]}, {"runs", json::array()}};
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const json& sch = runs[i].at("schedules");
    json entry = {{"run", metrics_paths[i]}, {"schedules", json::object()}};
    for (const auto& [name, s] : sch.items()) {
      json r = {{"speedup", nullptr},
                {"throughput_ratio", nullptr},
                {"encoder_std_ratio", nullptr},
                {"llm_std_ratio", nullptr}};
      if (ref.contains(name)) {
        const json& b = ref.at(name);
        r["speedup"] = ratio(b.at("mean_iteration_time").get<double>(),
                             s.at("mean_iteration_time").get<double>());
        r["throughput_ratio"] = ratio(s.at("throughput").get<double>(), b.at("throughput").get<double>());
        r["encoder_std_ratio"] = ratio(s.at("encoder_std").get<double>(), b.at("encoder_std").get<double>());
        r["llm_std_ratio"] = ratio(s.at("llm_std").get<double>(), b.at("llm_std").get<double>());
      }
      csv << i << ',' << name;
      for (const char* f : kFields) csv << ',' << cell(s.at(f));
      csv << ',' << cell(r["speedup"]) << ',' << cell(r["throughput_ratio"]) << ','
          << cell(r["encoder_std_ratio"]) << ',' << cell(r["llm_std_ratio"]) << '\n';
      entry["schedules"][name] = r;
    }
    // Entrain against every baseline of the same run.
    if (sch.contains("entrain")) {
      const json& e = sch.at("entrain");
      json vs = json::object();
      for (const auto& [name, s] : sch.items()) {
        if (name == "entrain") continue;
        vs[name] = {{"speedup", ratio(s.at("mean_iteration_time").get<double>(),
                                      e.at("mean_iteration_time").get<double>())},
                    {"encoder_std_ratio", ratio(e.at("encoder_std").get<double>(),
                                                s.at("encoder_std").get<double>())},
                    {"llm_std_ratio", ratio(e.at("llm_std").get<double>(), s.at("llm_std").get<double>())}};
      }
      entry["entrain_vs"] = vs;
    }
    summary["runs"].push_back(entry);
  }
  fs::path dir = prepare_dir(out_dir);
  write_file(dir / "comparison.csv", csv.str());
  write_file(dir / "summary.json", summary.dump(2));
}

}  // namespace mmpipe
