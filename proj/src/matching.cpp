// Copyright 2026 The mmpipe Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Subset-sum deferral sets and bottleneck bipartite matching.

#include <algorithm>
#include <cmath>
#include <limits>

#include "mmpipe/assigner.h"
#include "mmpipe/error.h"

namespace mmpipe {

namespace {

struct Cell {
  bool reachable = false;
  std::vector<std::size_t> items;  // ascending
};

bool better(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  if (a.size() != b.size()) return a.size() < b.size();
  return a < b;
}

// Kuhn's augmenting path search from `row`.
bool augment(int row, double threshold, const std::vector<std::vector<double>>& cost,
             std::vector<int>& col_owner, std::vector<char>& visited) {
  for (std::size_t col = 0; col < cost[row].size(); ++col) {
    if (cost[row][col] > threshold || visited[col]) continue;
    visited[col] = 1;
    if (col_owner[col] < 0 || augment(col_owner[col], threshold, cost, col_owner, visited)) {
      col_owner[col] = row;
      return true;
    }
  }
  return false;
}

// Matching of all critical rows, or empty optional-like flag on failure.
bool match_critical(const std::vector<std::vector<double>>& cost,
                    std::span<const double> standalone, double threshold,
                    std::vector<int>& col_owner) {
  const std::size_t cols = cost.empty() ? 0 : cost[0].size();
  col_owner.assign(cols, -1);
  for (std::size_t row = 0; row < cost.size(); ++row) {
    if (standalone[row] <= threshold) continue;
    std::vector<char> visited(cols, 0);
    if (!augment(static_cast<int>(row), threshold, cost, col_owner, visited)) return false;
  }
  return true;
}

void check_shape(const std::vector<std::vector<double>>& cost,
                 std::span<const double> standalone) {
  if (cost.size() != standalone.size()) {
    throw_invalid("bottleneck_match: cost rows and standalone costs differ in size");
  }
  if (cost.empty()) return;
  const std::size_t cols = cost[0].size();
  for (const auto& row : cost) {
    if (row.size() != cols) throw_invalid("bottleneck_match: ragged cost matrix");
  }
  if (cols < cost.size()) throw_invalid("bottleneck_match: more rows than columns");
}

}  // namespace

SubsetChoice closest_subset_sum(std::span<const double> weights, double target,
                                double resolution) {
  if (!(resolution > 0.0)) throw_invalid("closest_subset_sum: resolution must be positive");
  std::vector<long long> q(weights.size());
  long long total = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] < 0.0) throw_invalid("closest_subset_sum: negative weight");
    q[i] = std::llround(weights[i] / resolution);
    total += q[i];
  }
  const double tq = target / resolution;

  std::vector<Cell> table(static_cast<std::size_t>(total) + 1);
  table[0].reachable = true;
  for (std::size_t i = 0; i < q.size(); ++i) {
    // Zero-quantum items never improve the residual and only add items.
    if (q[i] == 0) continue;
    for (long long s = total; s >= q[i]; --s) {
      const Cell& from = table[s - q[i]];
      if (!from.reachable) continue;
      std::vector<std::size_t> cand = from.items;
      cand.push_back(i);
      Cell& to = table[s];
      if (!to.reachable || better(cand, to.items)) {
        to.reachable = true;
        to.items = std::move(cand);
      }
    }
  }

  SubsetChoice best;
  best.residual_quanta = std::numeric_limits<double>::infinity();
  bool have = false;
  for (long long s = 0; s <= total; ++s) {
    if (!table[s].reachable) continue;
    double r = std::fabs(tq - static_cast<double>(s));
    if (!have || r < best.residual_quanta ||
        (r == best.residual_quanta && better(table[s].items, best.chosen))) {
      have = true;
      best.residual_quanta = r;
      best.sum_quanta = s;
      best.chosen = table[s].items;
    }
  }
  return best;
}

DeferralChoice optimal_deferral_set(const Microbatch& overloaded, const Microbatch& underloaded,
                                    double resolution) {
  if (overloaded.w_llm_resident < underloaded.w_llm_resident) {
    throw_invalid("optimal_deferral_set: overloaded microbatch is lighter than its partner");
  }
  std::vector<const WorkItem*> candidates;
  for (const auto& it : overloaded.samples) {
    if (overloaded.is_fine(it.sample.id)) candidates.push_back(&it);
  }
  if (candidates.empty()) {
    for (const auto& it : overloaded.samples) candidates.push_back(&it);
  }
  std::sort(candidates.begin(), candidates.end(),
            [](const WorkItem* a, const WorkItem* b) { return a->sample.id < b->sample.id; });

  std::vector<double> weights;
  weights.reserve(candidates.size());
  for (const auto* c : candidates) weights.push_back(c->work.llm);
  const double delta = (overloaded.w_llm_resident - underloaded.w_llm_resident) / 2.0;
  SubsetChoice pick = closest_subset_sum(weights, delta, resolution);

  DeferralChoice out;
  out.residual_quanta = pick.residual_quanta;
  for (std::size_t i : pick.chosen) {
    out.sample_ids.push_back(candidates[i]->sample.id);
    out.deferred += candidates[i]->work.llm;
  }
  return out;
}

double bottleneck_cost(double w_llm_i, double w_llm_j, double w_deferred) {
  return std::max(w_llm_i - w_deferred, w_llm_j + w_deferred);
}

bool bottleneck_feasible(const std::vector<std::vector<double>>& cost,
                         std::span<const double> standalone, double threshold) {
  check_shape(cost, standalone);
  std::vector<int> owner;
  return match_critical(cost, standalone, threshold, owner);
}

MatchResult bottleneck_match(const std::vector<std::vector<double>>& cost,
                             std::span<const double> standalone) {
  check_shape(cost, standalone);
  MatchResult result;
  if (cost.empty()) return result;
  const int rows = static_cast<int>(cost.size());
  const int cols = static_cast<int>(cost[0].size());

  std::vector<double> candidates(standalone.begin(), standalone.end());
  for (const auto& row : cost) candidates.insert(candidates.end(), row.begin(), row.end());
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  // Feasibility is monotone in the threshold; the largest candidate leaves
  // no critical rows and is always feasible.
  std::size_t lo = 0, hi = candidates.size() - 1;
  std::vector<int> owner;
  while (lo < hi) {
    std::size_t mid = lo + (hi - lo) / 2;
    if (match_critical(cost, standalone, candidates[mid], owner)) {
      hi = mid;
    } else {
      lo = mid + 1;
    }
  }
  result.t_star = candidates[lo];
  if (!match_critical(cost, standalone, result.t_star, owner)) {
    throw_invariant("bottleneck_match: selected threshold is infeasible");
  }

  std::vector<int> row_col(rows, -1);
  for (int col = 0; col < cols; ++col) {
    if (owner[col] >= 0) row_col[owner[col]] = col;
  }
  std::vector<char> used(cols, 0);
  for (int r = 0; r < rows; ++r) {
    if (row_col[r] >= 0) used[row_col[r]] = 1;
  }
  int next_free = cols - 1;
  for (int r = 0; r < rows; ++r) {
    if (row_col[r] >= 0) {
      result.pairing.push_back({r, row_col[r], true});
      continue;
    }
    while (used[next_free]) --next_free;
    used[next_free] = 1;
    result.pairing.push_back({r, next_free, false});
  }
  return result;
}

}  // namespace mmpipe
