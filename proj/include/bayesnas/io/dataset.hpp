#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "bayesnas/autodiff/tensor.hpp"
#include "bayesnas/error.hpp"
#include "bayesnas/rng.hpp"

namespace bayesnas {

enum class FeatureKind { image, tabular };

/// Per-column z-score statistics; `apply` and `invert` are exact inverses up
/// to rounding.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;

  bool empty() const { return mean.empty(); }

  double apply(std::size_t col, double v) const { return (v - mean[col]) / stddev[col]; }
  double invert(std::size_t col, double z) const { return z * stddev[col] + mean[col]; }
};

/// Features (row-major, one row per example), integer labels, and metadata.
struct Dataset {
  Shape input_shape;  // per example, e.g. {1, 28, 28} or {13}
  std::vector<double> features;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  FeatureKind kind = FeatureKind::tabular;
  Normalization normalization;
  std::string tag;

  std::size_t size() const { return labels.size(); }
  std::size_t feature_count() const { return shape_numel(input_shape); }
  bool empty() const { return labels.empty(); }

  void validate() const {
    if (input_shape.empty()) throw DataError("dataset '" + tag + "' has no input shape");
    if (features.size() != size() * feature_count()) {
      throw DataError("dataset '" + tag + "': " + std::to_string(features.size()) + " feature values for " +
                      std::to_string(size()) + " examples of shape " + shape_str(input_shape));
    }
    for (int l : labels)
      if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
        throw DataError("dataset '" + tag + "': label " + std::to_string(l) + " outside [0, " +
                        std::to_string(num_classes) + ")");
      }
  }

  /// Batch tensor [b x input_shape...] for the given example indices.
  Tensor batch(std::span<const std::size_t> idx) const {
    const std::size_t f = feature_count();
    std::vector<double> v;
    v.reserve(idx.size() * f);
    for (std::size_t i : idx) {
      if (i >= size()) throw DataError("example index " + std::to_string(i) + " out of range");
      v.insert(v.end(), features.begin() + static_cast<std::ptrdiff_t>(i * f),
               features.begin() + static_cast<std::ptrdiff_t>((i + 1) * f));
    }
    Shape s{idx.size()};
    s.insert(s.end(), input_shape.begin(), input_shape.end());
    return Tensor(s, std::move(v));
  }

  std::vector<int> batch_labels(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(labels.at(i));
    return out;
  }

  Tensor all_features() const { return batch(all_indices()); }

  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> idx(size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return idx;
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset d;
    d.input_shape = input_shape;
    d.num_classes = num_classes;
    d.kind = kind;
    d.normalization = normalization;
    d.tag = tag;
    Tensor b = batch(idx);
    d.features.assign(b.data().begin(), b.data().end());
    d.labels = batch_labels(idx);
    return d;
  }

  std::pair<double, double> value_range() const {
    if (features.empty()) return {0.0, 0.0};
    auto [lo, hi] = std::minmax_element(features.begin(), features.end());
    return {*lo, *hi};
  }
};

inline void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
}

/// Consecutive mini-batches of a shuffled index list (last batch may be short).
inline std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> idx, std::size_t batch_size,
                                                          Rng* rng) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (rng) shuffle_indices(idx, *rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < idx.size(); i += batch_size)
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(i),
                     idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), i + batch_size)));
  return out;
}

/// 80/20 split stratified by label; examples within a class are shuffled
/// with `seed` before splitting.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(const Dataset& d,
                                                                                     double train_fraction,
                                                                                     std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must be in (0,1)");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < d.size(); ++i) by_class[d.labels[i]].push_back(i);
  Rng rng(seed, 0x5B117);
  std::vector<std::size_t> train, val;
  for (auto& [label, idx] : by_class) {
    shuffle_indices(idx, rng);
    const auto n_train = static_cast<std::size_t>(static_cast<double>(idx.size()) * train_fraction + 0.5);
    train.insert(train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    val.insert(val.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {train, val};
}

}  // namespace bayesnas
