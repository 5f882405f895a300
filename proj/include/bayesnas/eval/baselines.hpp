#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bayesnas/error.hpp"
#include "bayesnas/eval/cost.hpp"
#include "bayesnas/eval/metrics.hpp"
#include "bayesnas/io/dataset.hpp"
#include "bayesnas/search/search.hpp"
#include "bayesnas/searchspace/backbone.hpp"

namespace bayesnas {

enum class BaselineKind { nonbayes, lrt, mcdropout, ensemble };

inline BaselineKind parse_baseline_kind(std::string_view s) {
  if (s == "nonbayes") return BaselineKind::nonbayes;
  if (s == "lrt") return BaselineKind::lrt;
  if (s == "mcdropout") return BaselineKind::mcdropout;
  if (s == "ensemble") return BaselineKind::ensemble;
  throw ConfigError("unknown baseline '" + std::string(s) + "' (expected nonbayes, lrt, mcdropout or ensemble)");
}

inline std::string_view to_string(BaselineKind k) {
  switch (k) {
    case BaselineKind::nonbayes: return "nonbayes";
    case BaselineKind::lrt: return "lrt";
    case BaselineKind::mcdropout: return "mcdropout";
    case BaselineKind::ensemble: return "ensemble";
  }
  return "?";
}

/// One or more trained members whose MC-averaged predictions are averaged.
struct Predictor {
  std::string tag;
  std::vector<TrainedModel> members;

  Tensor predict(const Tensor& x, std::size_t n, Rng& rng) const {
    if (members.empty()) throw UsageError("predictor has no members");
    // running mean: identical members reproduce a single member exactly
    std::vector<double> mean;
    Shape shape;
    for (std::size_t k = 0; k < members.size(); ++k) {
      const Tensor p = predict_mc_batched(members[k].net.network, x, n, rng);
      if (k == 0) {
        mean = p.values();
        shape = p.shape();
        continue;
      }
      for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += (p[i] - mean[i]) / static_cast<double>(k + 1);
    }
    return Tensor(shape, std::move(mean));
  }

  FlopCount flops(std::size_t batch, std::size_t n) const {
    FlopCount total;
    for (const auto& m : members) {
      const FlopCount f = count_flops(m.net.network, m.net.input_shape, batch, n);
      total.prefix += f.prefix;
      total.suffix += f.suffix;
      total.full += f.full;
      total.frozen += f.frozen;
    }
    return total;
  }
};

struct BaselineOptions {
  TrainOptions train;
  double expansion = 1.0;
  ActivationKind activation = ActivationKind::relu;
  int kernel = 3;
  double dropout_p = 0.5;
  std::size_t ensemble_size = 10;
  bool ensemble_same_seed = false;  // every member uses train.seed
};

inline Predictor train_baseline(BaselineKind kind, const BackboneSpec& backbone, const CandidateSpace& space,
                                const Dataset& train, const BaselineOptions& o) {
  Predictor p;
  p.tag = std::string(to_string(kind));
  const std::size_t n_bayes = kind == BaselineKind::lrt ? backbone.size() : 0;
  const ArchitectureSelection sel = fixed_selection(space, o.expansion, o.activation, o.kernel, n_bayes);
  TrainOptions t = o.train;
  if (kind == BaselineKind::mcdropout) t.dropout_p = o.dropout_p;
  if (kind == BaselineKind::ensemble) {
    if (o.ensemble_size == 0) throw ConfigError("ensemble size must be positive");
    for (std::size_t i = 0; i < o.ensemble_size; ++i) {
      TrainOptions ti = t;
      if (!o.ensemble_same_seed) ti.seed = t.seed + 1000003ULL * i;
      p.members.push_back(train_selection(backbone, space, sel, train, ti));
    }
  } else {
    p.members.push_back(train_selection(backbone, space, sel, train, t));
  }
  return p;
}

struct EvalOptions {
  std::size_t mc_samples = 10;
  std::size_t latency_runs = 0;  // 0 skips timing
  std::size_t latency_batch = 128;
  std::uint64_t seed = 0;
};

/// Metric suite on a test set, with optional OOD inputs for delta-certainty.
inline MetricsRecord evaluate_predictor(const Predictor& p, const Dataset& test, const Tensor* ood_x,
                                        const EvalOptions& o) {
  if (test.empty()) throw DataError("evaluation set is empty");
  Rng rng(o.seed, 0xE7A1);
  Rng id_rng = rng.fork(1), ood_rng = rng.fork(2);
  const Tensor probs = p.predict(test.all_features(), o.mc_samples, id_rng);
  std::optional<Tensor> ood_probs;
  if (ood_x) ood_probs = p.predict(*ood_x, o.mc_samples, ood_rng);
  MetricsRecord m = compute_metrics(probs, test.labels, ood_probs ? &*ood_probs : nullptr);
  m.dataset = test.tag;
  m.model = p.tag;
  m.seed = o.seed;
  const std::size_t lb = std::min(o.latency_batch, test.size());
  const FlopCount f = p.flops(lb, o.mc_samples);
  m.flops_full = f.full;
  m.flops_suffix_frozen = f.frozen;
  if (o.latency_runs > 0) {
    auto idx = test.all_indices();
    idx.resize(lb);
    const Tensor xb = test.batch(idx);
    for (const auto& mem : p.members) {
      const Latency l = measure_latency(mem.net.network, xb, o.mc_samples, true, o.latency_runs, 10, o.seed);
      m.mean_latency_ms += l.mean_ms;
      m.latency_std += l.std_ms * l.std_ms;
    }
    m.latency_std = std::sqrt(m.latency_std);
  }
  return m;
}

struct SweepRecord {
  std::size_t n_bayes = 0;
  std::uint64_t flops_full = 0;
  std::uint64_t flops_suffix_frozen = 0;
  double latency_ms = 0.0;
  double accuracy = 0.0;
  double delta_certainty = 0.0;
};

/// Trains the backbone with exactly the last n layers Bayesian, n = 0..L.
inline std::vector<SweepRecord> n_last_sweep(const BackboneSpec& backbone, const CandidateSpace& space,
                                             const Dataset& train, const Dataset& test, const Tensor& ood_x,
                                             const BaselineOptions& bo, const EvalOptions& eo) {
  std::vector<SweepRecord> out;
  for (std::size_t n = 0; n <= backbone.size(); ++n) {
    Predictor p;
    p.tag = "lrt_last" + std::to_string(n);
    const auto sel = fixed_selection(space, bo.expansion, bo.activation, bo.kernel, n);
    p.members.push_back(train_selection(backbone, space, sel, train, bo.train));
    const MetricsRecord m = evaluate_predictor(p, test, &ood_x, eo);
    out.push_back({n, m.flops_full, m.flops_suffix_frozen, m.mean_latency_ms, m.accuracy, m.delta_certainty.value_or(0.0)});
  }
  return out;
}

inline std::string sweep_csv(const std::vector<SweepRecord>& rs) {
  std::string s = "n_bayes,flops_full,flops_suffix_frozen,latency_ms,accuracy,delta_certainty\n";
  for (const auto& r : rs) {
    s += std::to_string(r.n_bayes) + "," + std::to_string(r.flops_full) + "," + std::to_string(r.flops_suffix_frozen) +
         "," + format_number(r.latency_ms) + "," + format_number(r.accuracy) + "," + format_number(r.delta_certainty) +
         "\n";
  }
  return s;
}

}  // namespace bayesnas
