// Copyright 2026 The mmpipe Authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <ostream>
#include <random>

#include "json.hpp"
#include "mmpipe/error.h"
#include "mmpipe/workload.h"

namespace mmpipe {

using json = nlohmann::json;

namespace {

void validate(const DistributionSpec& d, const char* what) {
  auto fail = [&](const std::string& msg) {
    throw_invalid(std::string("invalid dataset spec (") + what + "): " + msg);
  };
  switch (d.family) {
    case DistributionFamily::kLogNormal:
      if (!(d.scale > 0.0)) fail("lognormal sigma must be positive");
      break;
    case DistributionFamily::kUniform:
      if (!(d.scale > 0.0)) fail("uniform upper bound must be positive");
      if (d.location > d.scale) fail("uniform lower bound exceeds upper bound");
      break;
    case DistributionFamily::kBimodal:
      if (!(d.scale > 0.0) || !(d.scale2 > 0.0)) fail("bimodal sigmas must be positive");
      if (d.weight < 0.0 || d.weight > 1.0) fail("bimodal weight must be in [0, 1]");
      break;
  }
}

std::int64_t to_tokens(double x) {
  return std::max<std::int64_t>(1, std::llround(x));
}

// Each modality owns its own engine so the two marginals are independent.
class TokenSampler {
 public:
  TokenSampler(const DistributionSpec& d, std::uint64_t seed) : spec_(d), rng_(seed) {}

  std::int64_t draw() {
    switch (spec_.family) {
      case DistributionFamily::kLogNormal:
        return to_tokens(std::exp(normal_(rng_) * spec_.scale + spec_.location));
      case DistributionFamily::kUniform: {
        auto lo = std::max<std::int64_t>(1, std::llround(spec_.location));
        auto hi = std::max<std::int64_t>(lo, std::llround(spec_.scale));
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng_);
      }
      case DistributionFamily::kBimodal: {
        bool first = unit_(rng_) < spec_.weight;
        double z = normal_(rng_);
        return first ? to_tokens(std::exp(z * spec_.scale + spec_.location))
                     : to_tokens(std::exp(z * spec_.scale2 + spec_.location2));
      }
    }
    return 1;
  }

 private:
  DistributionSpec spec_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> unit_{0.0, 1.0};
};

}  // namespace

std::vector<Sample> generate_synthetic_dataset(const DatasetSpec& spec) {
  if (spec.n_samples < 0) throw_invalid("invalid dataset spec: negative n_samples");
  validate(spec.encoder, "encoder");
  validate(spec.text, "text");

  std::seed_seq seq{spec.seed, std::uint64_t{0x5eed}};
  std::array<std::uint64_t, 2> seeds{};
  seq.generate(seeds.begin(), seeds.end());
  TokenSampler enc(spec.encoder, seeds[0]);
  TokenSampler txt(spec.text, seeds[1]);

  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(spec.n_samples));
  for (std::int64_t i = 0; i < spec.n_samples; ++i) {
    out.push_back({i, enc.draw(), txt.draw()});
  }
  return out;
}

void write_dataset_jsonl(std::ostream& out, std::span<const Sample> samples) {
  for (const auto& s : samples) {
    json j = {{"id", s.id}, {"encoder_tokens", s.encoder_tokens},
              {"text_tokens", s.text_tokens}};
    out << j.dump() << '\n';
  }
}

std::vector<Sample> read_dataset_jsonl(std::istream& in) {
  std::vector<Sample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      json j = json::parse(line);
      out.push_back({j.at("id").get<SampleId>(), j.at("encoder_tokens").get<std::int64_t>(),
                     j.at("text_tokens").get<std::int64_t>()});
    } catch (const json::exception& e) {
      throw_invalid("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  validate_dataset(out);
  return out;
}

}  // namespace mmpipe
