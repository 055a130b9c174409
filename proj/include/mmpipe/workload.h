// Copyright 2026 The mmpipe Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Samples, per-sample workloads and the per-layer quadratic cost model.
//
// A layer's latency under a (TP, CP) configuration is modelled as
// T(x) = a*x^2 + b*x + c where x is the number of tokens it processes. Stage
// and component costs are sums of layer costs. All times are milliseconds.

#pragma once

#include <compare>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace mmpipe {

using SampleId = std::int64_t;

struct Sample {
  SampleId id = 0;
  std::int64_t encoder_tokens = 0;  // modality tokens (e.g. vision patches)
  std::int64_t text_tokens = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

// Throws kInvalidInput on negative counts, empty samples or duplicate ids.
void validate_dataset(std::span<const Sample> samples);

struct WorkloadVector {
  double encoder = 0.0;
  double llm = 0.0;

  double total() const { return encoder + llm; }
};

// Encoder fraction of a sample's total workload, in [0, 1].
double workload_ratio(const WorkloadVector& w);

enum class ScalingClass { kQuadratic, kLinear };

struct LayerSpec {
  int layer_id = 0;
  std::string component_id;
  ScalingClass scaling = ScalingClass::kQuadratic;
  double param_bytes = 0.0;
};

struct Degrees {
  int tp = 1;
  int cp = 1;

  friend auto operator<=>(const Degrees&, const Degrees&) = default;
};

struct Quadratic {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;

  double operator()(double x) const { return (a * x + b) * x + c; }
};

struct CostKey {
  int layer_id = 0;
  int tp = 1;
  int cp = 1;

  friend auto operator<=>(const CostKey&, const CostKey&) = default;
};

class LayerCostModel {
 public:
  void set(const CostKey& key, const Quadratic& q) { coefficients_[key] = q; }
  bool contains(const CostKey& key) const { return coefficients_.count(key) != 0; }
  // Throws kInvalidInput ("unknown configuration") when the entry is absent.
  const Quadratic& at(const CostKey& key) const;
  const std::map<CostKey, Quadratic>& entries() const { return coefficients_; }
  bool empty() const { return coefficients_.empty(); }

  // True when every layer has an entry at the given degrees.
  bool covers(std::span<const LayerSpec> layers, Degrees d) const;

 private:
  std::map<CostKey, Quadratic> coefficients_;
};

struct Measurement {
  int layer_id = 0;
  int tp = 1;
  int cp = 1;
  double tokens = 0.0;
  double time = 0.0;
};

// Per-(layer, tp, cp) least-squares quadratic fit. Each group needs at least
// three distinct token counts; measured times must be nonnegative.
LayerCostModel fit_cost_model(std::span<const Measurement> measurements);

// max(0, a*x^2 + b*x + c) for the given layer and degrees.
double layer_cost(const LayerCostModel& model, int layer_id, int tp, int cp,
                  double tokens);

// Sum of layer_cost over `layers` evaluated at the same token count.
double stage_cost(const LayerCostModel& model, std::span<const LayerSpec> layers,
                  Degrees d, double tokens);

// How modality tokens enter the LLM sequence: x_llm = ratio*enc + text.
struct TokenMapping {
  double encoder_to_llm = 1.0;
};

double llm_tokens(const Sample& s, const TokenMapping& mapping = {});

WorkloadVector sample_workload(const LayerCostModel& model, const Sample& sample,
                               std::span<const LayerSpec> enc_layers,
                               std::span<const LayerSpec> llm_layers,
                               Degrees enc_degrees, Degrees llm_degrees,
                               const TokenMapping& mapping = {});

struct WorkItem {
  Sample sample;
  WorkloadVector work;
};

// ---------------------------------------------------------------------------
// Model description shared by the planner and the harness.

enum class ComponentKind { kEncoder, kLlm };

struct ComponentSpec {
  std::string id;
  ComponentKind kind = ComponentKind::kLlm;
  std::vector<LayerSpec> layers;
};

struct ModelSpec {
  std::vector<ComponentSpec> components;
  TokenMapping mapping;

  // Token count a component sees for one sample.
  double input_tokens(const ComponentSpec& component, const Sample& s) const;
  const ComponentSpec* find(ComponentKind kind) const;
};

// Workloads of every sample with all components at the given degrees
// (one Degrees per component, in component order).
std::vector<WorkItem> compute_workloads(const LayerCostModel& model,
                                        const ModelSpec& spec,
                                        std::span<const Sample> samples,
                                        std::span<const Degrees> degrees);

// Synthetic ground truth used in place of hardware measurements. A base
// quadratic per scaling class is divided across tp*cp ranks and charged a
// fixed collective overhead per extra rank.
struct ReferenceCostParams {
  Quadratic quadratic_layer{1e-7, 2e-3, 0.05};
  Quadratic linear_layer{0.0, 3e-3, 0.05};
  double per_rank_overhead = 0.02;
};

LayerCostModel make_reference_cost_model(const ModelSpec& spec,
                                         std::span<const Degrees> degree_grid,
                                         const ReferenceCostParams& params = {});

// ---------------------------------------------------------------------------
// Synthetic datasets.

enum class DistributionFamily { kLogNormal, kUniform, kBimodal };

// lognormal: location/scale are mu/sigma of log(tokens).
// uniform:   integers in [location, scale] (low, high).
// bimodal:   with probability `weight` the first lognormal (location, scale),
//            otherwise the second (location2, scale2).
struct DistributionSpec {
  DistributionFamily family = DistributionFamily::kLogNormal;
  double location = 0.0;
  double scale = 1.0;
  double location2 = 0.0;
  double scale2 = 1.0;
  double weight = 0.5;
};

struct DatasetSpec {
  std::int64_t n_samples = 0;
  DistributionSpec encoder;
  DistributionSpec text;
  std::uint64_t seed = 0;
};

std::vector<Sample> generate_synthetic_dataset(const DatasetSpec& spec);

// ---------------------------------------------------------------------------
// File formats.

// JSON Lines, one {"id", "encoder_tokens", "text_tokens"} object per line.
void write_dataset_jsonl(std::ostream& out, std::span<const Sample> samples);
std::vector<Sample> read_dataset_jsonl(std::istream& in);

// {"layer/tp/cp": [a, b, c], ...}
std::string cost_model_to_json(const LayerCostModel& model);
LayerCostModel cost_model_from_json(const std::string& text);

// JSON Lines of {"layer_id", "tp", "cp", "tokens", "time"}.
std::vector<Measurement> read_measurements_jsonl(std::istream& in);
void write_measurements_jsonl(std::ostream& out, std::span<const Measurement> m);

}  // namespace mmpipe
