// Copyright 2026 The mmpipe Authors.
// SPDX-License-Identifier: Apache-2.0

#include "mmpipe/workload.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <sstream>
#include <unordered_set>

#include "json.hpp"
#include "mmpipe/error.h"

namespace mmpipe {

using json = nlohmann::json;

namespace {

std::string key_string(const CostKey& k) {
  return std::to_string(k.layer_id) + "/" + std::to_string(k.tp) + "/" +
         std::to_string(k.cp);
}

// Solves the 3x3 system in place with partial pivoting.
std::array<long double, 3> solve3(std::array<std::array<long double, 4>, 3> m) {
  for (int col = 0; col < 3; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 3; ++r) {
      if (std::fabs(m[r][col]) > std::fabs(m[pivot][col])) pivot = r;
    }
    std::swap(m[col], m[pivot]);
    if (m[col][col] == 0.0L) throw_invalid("singular normal equations");
    for (int r = col + 1; r < 3; ++r) {
      long double f = m[r][col] / m[col][col];
      for (int c = col; c < 4; ++c) m[r][c] -= f * m[col][c];
    }
  }
  std::array<long double, 3> x{};
  for (int r = 2; r >= 0; --r) {
    long double acc = m[r][3];
    for (int c = r + 1; c < 3; ++c) acc -= m[r][c] * x[c];
    x[r] = acc / m[r][r];
  }
  return x;
}

Quadratic fit_group(const std::vector<const Measurement*>& group) {
  // Centre and scale abscissae so the normal matrix stays well conditioned,
  // then map the coefficients back to the raw monomial basis.
  long double mean = 0.0L;
  for (const auto* m : group) mean += m->tokens;
  mean /= static_cast<long double>(group.size());
  long double spread = 0.0L;
  for (const auto* m : group) spread = std::max(spread, std::fabs(m->tokens - mean));
  if (spread == 0.0L) spread = 1.0L;

  std::array<long double, 5> moments{};  // sum u^0 .. u^4
  std::array<long double, 3> rhs{};      // sum y*u^0 .. y*u^2
  for (const auto* m : group) {
    long double u = (m->tokens - mean) / spread;
    long double p = 1.0L;
    for (int k = 0; k < 5; ++k) {
      moments[k] += p;
      if (k < 3) rhs[k] += p * m->time;
      p *= u;
    }
  }
  // Unknowns ordered (gamma, beta, alpha) for T = alpha*u^2 + beta*u + gamma.
  std::array<std::array<long double, 4>, 3> system{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) system[r][c] = moments[r + c];
    system[r][3] = rhs[r];
  }
  auto [gamma, beta, alpha] = solve3(system);

  long double s2 = spread * spread;
  Quadratic q;
  q.a = static_cast<double>(alpha / s2);
  q.b = static_cast<double>(beta / spread - 2.0L * alpha * mean / s2);
  q.c = static_cast<double>(alpha * mean * mean / s2 - beta * mean / spread + gamma);
  return q;
}

}  // namespace

void validate_dataset(std::span<const Sample> samples) {
  std::unordered_set<SampleId> ids;
  for (const auto& s : samples) {
    if (s.encoder_tokens < 0 || s.text_tokens < 0) {
      throw_invalid("sample " + std::to_string(s.id) + " has negative token count");
    }
    if (s.encoder_tokens + s.text_tokens == 0) {
      throw_invalid("sample " + std::to_string(s.id) + " has no tokens");
    }
    if (!ids.insert(s.id).second) {
      throw_invalid("duplicate sample id " + std::to_string(s.id));
    }
  }
}

double workload_ratio(const WorkloadVector& w) {
  if (w.encoder < 0.0 || w.llm < 0.0) throw_invalid("negative workload");
  double total = w.encoder + w.llm;
  if (!(total > 0.0)) throw_invalid("degenerate sample: zero total workload");
  return w.encoder / total;
}

const Quadratic& LayerCostModel::at(const CostKey& key) const {
  auto it = coefficients_.find(key);
  if (it == coefficients_.end()) {
    throw_invalid("unknown configuration for layer/tp/cp " + key_string(key));
  }
  return it->second;
}

bool LayerCostModel::covers(std::span<const LayerSpec> layers, Degrees d) const {
  return std::all_of(layers.begin(), layers.end(), [&](const LayerSpec& l) {
    return contains({l.layer_id, d.tp, d.cp});
  });
}

LayerCostModel fit_cost_model(std::span<const Measurement> measurements) {
  std::map<CostKey, std::vector<const Measurement*>> groups;
  for (const auto& m : measurements) {
    if (!(m.time >= 0.0) || !std::isfinite(m.time)) {
      throw_invalid("invalid measurement: negative time for layer/tp/cp " +
                    key_string({m.layer_id, m.tp, m.cp}));
    }
    if (m.tokens < 0.0) throw_invalid("invalid measurement: negative token count");
    groups[{m.layer_id, m.tp, m.cp}].push_back(&m);
  }

  std::vector<std::string> underdetermined;
  for (const auto& [key, group] : groups) {
    std::set<double> xs;
    for (const auto* m : group) xs.insert(m->tokens);
    if (xs.size() < 3) underdetermined.push_back(key_string(key));
  }
  if (!underdetermined.empty()) {
    std::string msg = "underdetermined fit (need >= 3 distinct token counts) for";
    for (const auto& k : underdetermined) msg += " " + k;
    throw_invalid(msg);
  }

  LayerCostModel model;
  for (const auto& [key, group] : groups) model.set(key, fit_group(group));
  return model;
}

double layer_cost(const LayerCostModel& model, int layer_id, int tp, int cp,
                  double tokens) {
  if (tokens < 0.0) throw_invalid("negative token count");
  return std::max(0.0, model.at({layer_id, tp, cp})(tokens));
}

double stage_cost(const LayerCostModel& model, std::span<const LayerSpec> layers,
                  Degrees d, double tokens) {
  double sum = 0.0;
  for (const auto& l : layers) sum += layer_cost(model, l.layer_id, d.tp, d.cp, tokens);
  return sum;
}

double llm_tokens(const Sample& s, const TokenMapping& mapping) {
  return mapping.encoder_to_llm * static_cast<double>(s.encoder_tokens) +
         static_cast<double>(s.text_tokens);
}

WorkloadVector sample_workload(const LayerCostModel& model, const Sample& sample,
                               std::span<const LayerSpec> enc_layers,
                               std::span<const LayerSpec> llm_layers,
                               Degrees enc_degrees, Degrees llm_degrees,
                               const TokenMapping& mapping) {
  WorkloadVector w;
  w.encoder = stage_cost(model, enc_layers, enc_degrees,
                         static_cast<double>(sample.encoder_tokens));
  w.llm = stage_cost(model, llm_layers, llm_degrees, llm_tokens(sample, mapping));
  return w;
}

double ModelSpec::input_tokens(const ComponentSpec& component, const Sample& s) const {
  if (component.kind == ComponentKind::kEncoder) {
    return static_cast<double>(s.encoder_tokens);
  }
  return llm_tokens(s, mapping);
}

const ComponentSpec* ModelSpec::find(ComponentKind kind) const {
  for (const auto& c : components) {
    if (c.kind == kind) return &c;
  }
  return nullptr;
}

std::vector<WorkItem> compute_workloads(const LayerCostModel& model,
                                        const ModelSpec& spec,
                                        std::span<const Sample> samples,
                                        std::span<const Degrees> degrees) {
  if (degrees.size() != spec.components.size()) {
    throw_invalid("compute_workloads: one Degrees entry per component required");
  }
  std::vector<WorkItem> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    WorkItem item{s, {}};
    for (std::size_t i = 0; i < spec.components.size(); ++i) {
      const auto& comp = spec.components[i];
      double cost = stage_cost(model, comp.layers, degrees[i], spec.input_tokens(comp, s));
      if (comp.kind == ComponentKind::kEncoder) {
        item.work.encoder += cost;
      } else {
        item.work.llm += cost;
      }
    }
    out.push_back(item);
  }
  return out;
}

LayerCostModel make_reference_cost_model(const ModelSpec& spec,
                                         std::span<const Degrees> degree_grid,
                                         const ReferenceCostParams& params) {
  LayerCostModel model;
  for (const auto& comp : spec.components) {
    for (const auto& layer : comp.layers) {
      const Quadratic& base = layer.scaling == ScalingClass::kQuadratic
                                  ? params.quadratic_layer
                                  : params.linear_layer;
      for (const auto& d : degree_grid) {
        double ranks = static_cast<double>(d.tp * d.cp);
        Quadratic q{base.a / ranks, base.b / ranks,
                    base.c + params.per_rank_overhead * (ranks - 1.0)};
        model.set({layer.layer_id, d.tp, d.cp}, q);
      }
    }
  }
  return model;
}

std::string cost_model_to_json(const LayerCostModel& model) {
  json j = json::object();
  for (const auto& [key, q] : model.entries()) j[key_string(key)] = {q.a, q.b, q.c};
  return j.dump(2);
}

LayerCostModel cost_model_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw_invalid(std::string("cost model: ") + e.what());
  }
  if (!j.is_object()) throw_invalid("cost model: expected a JSON object");
  LayerCostModel model;
  for (const auto& [k, v] : j.items()) {
    CostKey key;
    char sep1 = 0, sep2 = 0;
    std::istringstream in(k);
    if (!(in >> key.layer_id >> sep1 >> key.tp >> sep2 >> key.cp) || sep1 != '/' ||
        sep2 != '/') {
      throw_invalid("cost model: bad key '" + k + "', expected layer/tp/cp");
    }
    if (!v.is_array() || v.size() != 3) {
      throw_invalid("cost model: value for '" + k + "' must be [a, b, c]");
    }
    model.set(key, {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()});
  }
  return model;
}

std::vector<Measurement> read_measurements_jsonl(std::istream& in) {
  std::vector<Measurement> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      json j = json::parse(line);
      out.push_back({j.at("layer_id").get<int>(), j.value("tp", 1), j.value("cp", 1),
                     j.at("tokens").get<double>(), j.at("time").get<double>()});
    } catch (const json::exception& e) {
      throw_invalid("measurements line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_measurements_jsonl(std::ostream& out, std::span<const Measurement> ms) {
  for (const auto& m : ms) {
    json j = {{"layer_id", m.layer_id}, {"tp", m.tp},         {"cp", m.cp},
              {"tokens", m.tokens},     {"time", m.time}};
    out << j.dump() << '\n';
  }
}

}  // namespace mmpipe
