#pragma once

#include <cmath>
#include <numbers>
#include <string>

#include "bayesnas/error.hpp"
#include "bayesnas/io/dataset.hpp"
#include "bayesnas/rng.hpp"

namespace bayesnas {

enum class SynthKind { gaussians, moons };

inline SynthKind parse_synth_kind(std::string_view s) {
  if (s == "gaussians") return SynthKind::gaussians;
  if (s == "moons") return SynthKind::moons;
  throw ConfigError("unknown synthetic dataset '" + std::string(s) + "' (expected gaussians or moons)");
}

struct SynthOptions {
  double separation = 4.0;  // gaussians: distance between class means in units of sigma
  double noise = 0.1;       // moons: isotropic noise
  std::size_t dim = 2;      // gaussians: feature count (separation along the first axis)
};

/// Two-class toy data; labels alternate 0,1,0,1,... so even n is exactly balanced.
inline Dataset synth_dataset(SynthKind kind, std::size_t n, std::uint64_t seed, SynthOptions opts = {}) {
  if (n == 0) throw ConfigError("synthetic dataset size must be positive");
  Rng rng(seed, 0x5E7);
  Dataset d;
  d.kind = FeatureKind::tabular;
  d.num_classes = 2;
  if (kind == SynthKind::gaussians) {
    if (opts.dim == 0) throw ConfigError("gaussians need at least one dimension");
    d.tag = "synth-gaussians";
    d.input_shape = {opts.dim};
    for (std::size_t i = 0; i < n; ++i) {
      const int y = static_cast<int>(i % 2);
      const double c = (y == 0 ? -0.5 : 0.5) * opts.separation;
      for (std::size_t k = 0; k < opts.dim; ++k) d.features.push_back((k == 0 ? c : 0.0) + rng.normal());
      d.labels.push_back(y);
    }
  } else {
    d.tag = "synth-moons";
    d.input_shape = {2};
    for (std::size_t i = 0; i < n; ++i) {
      const int y = static_cast<int>(i % 2);
      const double t = rng.uniform() * std::numbers::pi;
      double x0 = std::cos(t), x1 = std::sin(t);
      if (y == 1) {
        x0 = 1.0 - x0;
        x1 = 0.5 - x1;
      }
      d.features.push_back(x0 + opts.noise * rng.normal());
      d.features.push_back(x1 + opts.noise * rng.normal());
      d.labels.push_back(y);
    }
  }
  return d;
}

}  // namespace bayesnas
