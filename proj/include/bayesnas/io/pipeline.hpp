#pragma once

#include <algorithm>
#include <string>

#include "bayesnas/error.hpp"
#include "bayesnas/io/config.hpp"
#include "bayesnas/oodgen/transforms.hpp"
#include "bayesnas/oodgen/vae.hpp"
#include "bayesnas/search/search.hpp"

namespace bayesnas {

struct RunData {
  SplitData split;
  Dataset test;
};

/// Train/validation split plus the evaluation set described by a config.
/// Validation and test files are normalized with the training statistics.
inline RunData load_run_data(const RunConfig& c) {
  if (c.dataset.empty()) throw ConfigError("config has no dataset");
  Dataset d = load_dataset_spec(c.dataset, c.label_column);
  RunData out;
  if (!c.val_dataset.empty()) {
    Dataset v = load_dataset_spec(c.val_dataset, c.label_column, d.normalization.empty() ? nullptr : &d.normalization);
    out.split = make_split(std::move(d), std::move(v));
  } else {
    out.split = split_dataset(d, c.search.train_fraction, c.seed);
  }
  if (c.test_dataset.empty()) {
    out.test = out.split.val;
  } else {
    const Normalization& n = out.split.train.normalization;
    out.test = load_dataset_spec(c.test_dataset, c.label_column, n.empty() ? nullptr : &n);
    out.test.validate();
    if (out.test.input_shape != out.split.input_shape) throw DataError("test inputs differ in shape from training inputs");
  }
  return out;
}

/// OOD inputs derived from `base`: "vae" decodes beta-shifted latents,
/// anything else is a baseline transform spec such as "rotate:30".
inline Tensor make_ood_inputs(const std::string& spec, const Dataset& base, const Vae* vae, double beta,
                              std::uint64_t seed) {
  Rng rng(seed, 0x00D);
  const Tensor x = base.all_features();
  if (spec == "vae") {
    if (!vae) throw ConfigError("VAE OOD inputs need a trained VAE checkpoint");
    return generate_ood(*vae, x, beta, rng);
  }
  const BaselineOod o = parse_baseline_ood(spec);
  if (o.kind == BaselineOodKind::rotate && base.input_shape.size() != 3) {
    throw ConfigError("rotate OOD needs image data, got inputs of shape " + shape_str(base.input_shape));
  }
  const auto [lo, hi] = std::minmax_element(base.features.begin(), base.features.end());
  return baseline_ood(o, x, rng, *lo, *hi);
}

}  // namespace bayesnas
