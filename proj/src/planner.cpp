// Copyright 2026 The mmpipe Authors.
// SPDX-License-Identifier: Apache-2.0

#include "mmpipe/planner.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mmpipe/error.h"

namespace mmpipe {

WorkloadTable::WorkloadTable(std::size_t components, std::vector<double> row_major)
    : components_(components), values_(std::move(row_major)) {
  if (components_ == 0 || values_.size() % components_ != 0) {
    throw_invalid("WorkloadTable: size is not a multiple of the component count");
  }
}

WorkloadTable WorkloadTable::from_dataset(const LayerCostModel& costs, const ModelSpec& model,
                                          std::span<const Sample> dataset) {
  std::vector<double> values;
  values.reserve(dataset.size() * model.components.size());
  for (const auto& s : dataset) {
    for (const auto& comp : model.components) {
      values.push_back(stage_cost(costs, comp.layers, Degrees{}, model.input_tokens(comp, s)));
    }
  }
  return WorkloadTable(model.components.size(), std::move(values));
}

WorkloadTable WorkloadTable::from_items(std::span<const WorkItem> items) {
  std::vector<double> values;
  values.reserve(items.size() * 2);
  for (const auto& it : items) {
    values.push_back(it.work.encoder);
    values.push_back(it.work.llm);
  }
  return WorkloadTable(2, std::move(values));
}

int GpuAllocation::total() const { return std::accumulate(gpus.begin(), gpus.end(), 0); }

std::string to_string(const GpuAllocation& a) {
  std::string out;
  for (std::size_t i = 0; i < a.gpus.size(); ++i) {
    if (i) out += ":";
    out += std::to_string(a.gpus[i]);
  }
  return out;
}

void validate(const ClusterSpec& c) {
  if (c.n_total <= 0 || !(c.vram_per_gpu > 0) || !(c.reshard_bandwidth > 0) ||
      !(c.bytes_per_token_activation > 0)) {
    throw_invalid("cluster spec: all fields must be positive");
  }
}

ProportionVector estimate_macroscopic_proportions(const WorkloadTable& table, int n,
                                                  std::mt19937_64& rng) {
  if (table.size() == 0) throw_invalid("estimate_macroscopic_proportions: empty dataset");
  if (n < 1) throw_invalid("estimate_macroscopic_proportions: batch size must be >= 1");
  std::uniform_int_distribution<std::size_t> pick(0, table.size() - 1);
  std::vector<double> sums(table.components(), 0.0);
  for (int i = 0; i < n; ++i) {
    std::size_t row = pick(rng);
    for (std::size_t c = 0; c < table.components(); ++c) sums[c] += table.at(row, c);
  }
  double total = std::accumulate(sums.begin(), sums.end(), 0.0);
  if (!(total > 0.0)) throw_invalid("estimate_macroscopic_proportions: zero total workload");
  ProportionVector p;
  for (double s : sums) p.fractions.push_back(s / total);
  return p;
}

ProportionVector estimate_macroscopic_proportions(const WorkloadTable& table, int n,
                                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return estimate_macroscopic_proportions(table, n, rng);
}

GpuAllocation proportional_allocation(int n_total, int dp, const ProportionVector& p) {
  if (dp < 1 || n_total < 1) throw_invalid("proportional_allocation: bad GPU counts");
  if (n_total % dp != 0) throw_invalid("proportional_allocation: n_total not divisible by dp");
  const int budget = n_total / dp;
  const int n = static_cast<int>(p.fractions.size());
  if (n == 0) throw_invalid("proportional_allocation: no components");
  if (budget < n) {
    throw_infeasible("infeasible allocation: " + std::to_string(budget) + " GPUs for " +
                     std::to_string(n) + " components");
  }
  double sum = 0.0;
  for (double f : p.fractions) {
    if (!(f >= 0.0) || !std::isfinite(f)) throw_invalid("proportional_allocation: bad fraction");
    sum += f;
  }
  if (!(sum > 0.0)) throw_invalid("proportional_allocation: fractions sum to zero");

  std::vector<double> quota(n);
  GpuAllocation a;
  a.gpus.resize(n);
  int assigned = 0;
  for (int i = 0; i < n; ++i) {
    quota[i] = p.fractions[i] / sum * budget;
    a.gpus[i] = std::max(1, static_cast<int>(std::floor(quota[i])));
    assigned += a.gpus[i];
  }
  // Largest remainder first; deficit = quota - current count.
  while (assigned < budget) {
    int best = 0;
    for (int i = 1; i < n; ++i) {
      if (quota[i] - a.gpus[i] > quota[best] - a.gpus[best]) best = i;
    }
    ++a.gpus[best];
    ++assigned;
  }
  // Only reachable when the one-GPU floor overshot the budget.
  while (assigned > budget) {
    int best = -1;
    for (int i = 0; i < n; ++i) {
      if (a.gpus[i] <= 1) continue;
      if (best < 0 || a.gpus[i] - quota[i] > a.gpus[best] - quota[best]) best = i;
    }
    if (best < 0) throw_invariant("proportional_allocation: cannot meet budget");
    --a.gpus[best];
    --assigned;
  }
  return a;
}

int required_trials(double alpha, double p_error) {
  if (!(alpha > 0.0 && alpha < 1.0) || !(p_error > 0.0 && p_error < 1.0)) {
    throw_invalid("required_trials: alpha and p_error must lie in (0, 1)");
  }
  double k = std::log(alpha) / std::log1p(-p_error);
  // Absorb rounding noise when the ratio is an exact integer.
  return std::max(1, static_cast<int>(std::ceil(k - 1e-12)));
}

StableBatchResult find_min_stable_batch(const ProfilingOptions& options,
                                        const ClusterSpec& cluster, int dp,
                                        const WorkloadTable& table, std::uint64_t seed) {
  if (options.n0 < 1) throw_invalid("find_min_stable_batch: n0 must be >= 1");
  if (table.size() == 0) throw_invalid("find_min_stable_batch: empty dataset");
  std::mt19937_64 rng(seed);
  StableBatchResult result;
  result.trials = required_trials(options.alpha, options.p_error);

  for (long long n = options.n0;; n *= 2) {
    if (n > options.max_batch) {
      throw_infeasible("no stable profiling batch size up to " +
                       std::to_string(options.max_batch) +
                       " samples (mean ratio may sit on an allocation breakpoint)");
    }
    const int batch = static_cast<int>(n);
    TrialRound round;
    round.batch_size = batch;
    round.reference = proportional_allocation(
        cluster.n_total, dp, estimate_macroscopic_proportions(table, batch, rng));
    round.allocations_seen.push_back(round.reference);
    bool stable = true;
    for (int t = 0; t < result.trials; ++t) {
      GpuAllocation test = proportional_allocation(
          cluster.n_total, dp, estimate_macroscopic_proportions(table, batch, rng));
      ++round.trials_run;
      if (std::find(round.allocations_seen.begin(), round.allocations_seen.end(), test) ==
          round.allocations_seen.end()) {
        round.allocations_seen.push_back(test);
      }
      if (test != round.reference) {
        stable = false;
        if (!options.full_trial_log) break;
      }
    }
    round.passed = stable;
    result.log.push_back(round);
    if (stable) {
      result.b_min = batch;
      result.reference = round.reference;
      return result;
    }
  }
}

std::optional<TerminationBound> termination_bound(const WorkloadTable& table, int budget) {
  if (table.components() != 2 || table.size() == 0 || budget < 2) return std::nullopt;
  std::vector<double> ratios;
  ratios.reserve(table.size());
  for (std::size_t i = 0; i < table.size(); ++i) {
    double total = table.at(i, 0) + table.at(i, 1);
    if (total > 0.0) ratios.push_back(table.at(i, 0) / total);
  }
  if (ratios.empty()) return std::nullopt;
  TerminationBound b;
  for (double r : ratios) b.mean_ratio += r;
  b.mean_ratio /= static_cast<double>(ratios.size());
  for (double r : ratios) b.ratio_std += (r - b.mean_ratio) * (r - b.mean_ratio);
  b.ratio_std = std::sqrt(b.ratio_std / static_cast<double>(ratios.size()));
  // Two-component rounding flips at (j + 1/2) / budget; the one-GPU floor
  // removes the outermost flips.
  b.breakpoint_distance = std::numeric_limits<double>::infinity();
  for (int j = 1; j + 1 < budget; ++j) {
    double bp = (j + 0.5) / budget;
    b.breakpoint_distance = std::min(b.breakpoint_distance, std::fabs(b.mean_ratio - bp));
  }
  if (std::isinf(b.breakpoint_distance)) {
    b.n_star_bound = 1.0;
  } else if (b.breakpoint_distance > 0.0) {
    double q = 6.0 * b.ratio_std / b.breakpoint_distance;
    b.n_star_bound = q * q;
  } else {
    b.n_star_bound = std::numeric_limits<double>::infinity();
  }
  return b;
}

StagePartition intra_module_balance(std::span<const double> layer_costs, int pp) {
  const int layers = static_cast<int>(layer_costs.size());
  if (pp < 1) throw_invalid("intra_module_balance: pp must be >= 1");
  if (pp > layers) {
    throw_infeasible("infeasible partition: pp=" + std::to_string(pp) + " exceeds " +
                     std::to_string(layers) + " layers");
  }
  // range[i][j]: cost of layers i..j summed left to right.
  std::vector<std::vector<double>> range(layers, std::vector<double>(layers, 0.0));
  for (int i = 0; i < layers; ++i) {
    double acc = 0.0;
    for (int j = i; j < layers; ++j) {
      acc += layer_costs[j];
      range[i][j] = acc;
    }
  }
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // best[p][l]: min bottleneck of the first l layers over p stages.
  std::vector<std::vector<double>> best(pp + 1, std::vector<double>(layers + 1, kInf));
  std::vector<std::vector<int>> cut(pp + 1, std::vector<int>(layers + 1, -1));
  for (int l = 1; l <= layers; ++l) best[1][l] = range[0][l - 1];
  for (int p = 2; p <= pp; ++p) {
    for (int l = p; l <= layers; ++l) {
      for (int prev = p - 1; prev < l; ++prev) {
        double v = std::max(best[p - 1][prev], range[prev][l - 1]);
        if (v < best[p][l]) {
          best[p][l] = v;
          cut[p][l] = prev;
        }
      }
    }
  }

  StagePartition part;
  part.stages.resize(pp);
  int end = layers;
  for (int p = pp; p >= 1; --p) {
    int start = p == 1 ? 0 : cut[p][end];
    part.stages[p - 1] = {start, end - 1};
    end = start;
  }
  for (const auto& [first, last] : part.stages) part.latencies.push_back(range[first][last]);
  part.bottleneck = best[pp][layers];
  return part;
}

StagePartition intra_module_balance(std::span<const LayerSpec> layers, int pp, Degrees d,
                                    const LayerCostModel& costs, double tokens,
                                    double time_multiplier) {
  std::vector<double> per_layer;
  per_layer.reserve(layers.size());
  for (const auto& l : layers) {
    per_layer.push_back(time_multiplier * layer_cost(costs, l.layer_id, d.tp, d.cp, tokens));
  }
  return intra_module_balance(per_layer, pp);
}

double schedule_iteration_time(int k_microbatches, std::span<const StagePartition> partitions,
                               double reshard) {
  if (k_microbatches < 1) throw_invalid("schedule_iteration_time: K must be >= 1");
  double fill = 0.0;
  double slowest = 0.0;
  for (const auto& part : partitions) {
    for (double tau : part.latencies) fill += tau;
    slowest = std::max(slowest, part.bottleneck);
  }
  return fill + (k_microbatches - 1) * slowest + reshard;
}

int ParallelConfig::total_stages() const {
  int s = 0;
  for (const auto& c : components) s += c.pp;
  return s;
}

double reshard_cost(const ParallelConfig& config, int k_microbatches,
                    double avg_boundary_tokens, const ClusterSpec& cluster) {
  double ms = 0.0;
  for (std::size_t i = 0; i + 1 < config.components.size(); ++i) {
    const auto& a = config.components[i];
    const auto& b = config.components[i + 1];
    if (a.tp == b.tp && a.cp == b.cp) continue;
    ms += 1000.0 * k_microbatches * avg_boundary_tokens * cluster.bytes_per_token_activation /
          cluster.reshard_bandwidth;
  }
  return ms;
}

std::vector<double> memory_per_rank(const ParallelConfig& config, const ModelSpec& model,
                                    const MemoryModel& memory, const ClusterSpec& cluster) {
  const int depth = config.total_stages();
  std::vector<double> out;
  int global_stage = 0;
  for (std::size_t i = 0; i < config.components.size(); ++i) {
    const auto& par = config.components[i];
    const auto& layers = model.components.at(i).layers;
    const auto& part = config.partitions.at(i);
    double tokens = i < memory.microbatch_tokens.size() ? memory.microbatch_tokens[i] : 0.0;
    for (const auto& [first, last] : part.stages) {
      double params = 0.0;
      int count = 0;
      for (int l = first; l <= last; ++l) {
        params += layers.at(l).param_bytes;
        ++count;
      }
      params /= par.tp;
      int in_flight = std::min(depth - global_stage, std::max(1, config.microbatches));
      double activations = static_cast<double>(in_flight) * tokens *
                           cluster.bytes_per_token_activation * count / (par.tp * par.cp);
      out.push_back(params * (1.0 + memory.optimizer_multiplier) + activations);
      ++global_stage;
    }
  }
  return out;
}

double memory_estimate(const ParallelConfig& config, const ModelSpec& model,
                       const MemoryModel& memory, const ClusterSpec& cluster) {
  auto ranks = memory_per_rank(config, model, memory, cluster);
  return ranks.empty() ? 0.0 : *std::max_element(ranks.begin(), ranks.end());
}

namespace {

std::vector<ComponentParallelism> factorizations(int gpus, const ComponentSpec& comp,
                                                 const LayerCostModel& costs) {
  std::vector<ComponentParallelism> out;
  const int layers = static_cast<int>(comp.layers.size());
  for (int tp = 1; tp <= gpus; ++tp) {
    if (gpus % tp) continue;
    for (int cp = 1; cp <= gpus / tp; ++cp) {
      if ((gpus / tp) % cp) continue;
      int pp = gpus / (tp * cp);
      if (pp > layers) continue;
      if (!costs.covers(comp.layers, {tp, cp})) continue;
      out.push_back({tp, cp, pp});
    }
  }
  return out;
}

}  // namespace

SearchResult search_config(const SearchOptions& options, const ClusterSpec& cluster,
                           const ModelSpec& model, const LayerCostModel& costs,
                           std::span<const Sample> dataset, std::uint64_t seed) {
  validate(cluster);
  if (model.components.empty()) throw_invalid("search_config: model has no components");
  if (dataset.empty()) throw_invalid("search_config: empty dataset");
  if (options.mu < 1 || options.b_min < 1) throw_invalid("search_config: bad batch sizes");
  if (options.b_global < options.b_min) {
    throw_invalid("search_config: global batch must be >= b_min");
  }

  SearchResult result;
  WorkloadTable table = WorkloadTable::from_dataset(costs, model, dataset);
  result.proportions = estimate_macroscopic_proportions(table, options.b_min, seed);

  // Dataset-mean tokens per microbatch for each component and at the
  // encoder -> LLM boundary.
  double boundary_tokens = 0.0;
  for (const auto& comp : model.components) {
    double sum = 0.0;
    for (const auto& s : dataset) sum += model.input_tokens(comp, s);
    result.representative_tokens.push_back(sum / dataset.size() * options.mu);
  }
  {
    double enc = 0.0;
    for (const auto& s : dataset) enc += static_cast<double>(s.encoder_tokens);
    boundary_tokens = model.mapping.encoder_to_llm * enc / dataset.size() * options.mu;
  }
  MemoryModel memory{options.optimizer_multiplier, result.representative_tokens};

  std::vector<int> dps;
  for (int dp = cluster.n_total; dp >= 1; --dp) {
    if (cluster.n_total % dp) continue;
    if (options.dp && *options.dp != dp) continue;
    dps.push_back(dp);
  }

  bool found = false;
  double best_throughput = -1.0;
  const std::size_t n_comp = model.components.size();
  for (int dp : dps) {
    if (cluster.n_total / dp < static_cast<int>(n_comp)) continue;
    GpuAllocation alloc = proportional_allocation(cluster.n_total, dp, result.proportions);
    if (options.b_global % (dp * options.mu) != 0) {
      ++result.candidates_skipped;
      continue;
    }
    const int k = options.b_global / (dp * options.mu);

    std::vector<std::vector<ComponentParallelism>> choices(n_comp);
    bool any_empty = false;
    for (std::size_t i = 0; i < n_comp; ++i) {
      choices[i] = factorizations(alloc.gpus[i], model.components[i], costs);
      any_empty |= choices[i].empty();
    }
    if (any_empty) continue;

    std::vector<std::size_t> idx(n_comp, 0);
    while (true) {
      ParallelConfig cfg;
      cfg.dp = dp;
      cfg.allocation = alloc;
      cfg.microbatches = k;
      for (std::size_t i = 0; i < n_comp; ++i) cfg.components.push_back(choices[i][idx[i]]);

      // Tier 1: per-component min-max partition at representative tokens.
      for (std::size_t i = 0; i < n_comp; ++i) {
        const auto& par = cfg.components[i];
        cfg.partitions.push_back(intra_module_balance(
            model.components[i].layers, par.pp, {par.tp, par.cp}, costs,
            result.representative_tokens[i], 1.0 + options.backward_multiplier));
      }
      cfg.memory_per_rank = memory_estimate(cfg, model, memory, cluster);
      if (cfg.memory_per_rank > cluster.vram_per_gpu) {
        ++result.candidates_skipped;
      } else {
        // Tier 2: slowest stage across components under the shared schedule.
        cfg.reshard = reshard_cost(cfg, k, boundary_tokens, cluster);
        cfg.predicted_iteration_time = schedule_iteration_time(k, cfg.partitions, cfg.reshard);
        double throughput = static_cast<double>(dp * k) / cfg.predicted_iteration_time;
        cfg.predicted_throughput = 1000.0 * dp * k * options.mu / cfg.predicted_iteration_time;
        ++result.candidates_evaluated;
        bool better = throughput > best_throughput ||
                      (throughput == best_throughput &&
                       cfg.total_stages() < result.best.total_stages());
        if (!found || better) {
          found = true;
          best_throughput = throughput;
          result.best = cfg;
        }
      }

      // Odometer over per-component choices, component 0 outermost.
      int pos = static_cast<int>(n_comp) - 1;
      while (pos >= 0 && ++idx[pos] == choices[pos].size()) {
        idx[pos] = 0;
        --pos;
      }
      if (pos < 0) break;
    }
  }
  if (!found) throw_infeasible("no feasible parallel configuration");
  return result;
}

}  // namespace mmpipe
