#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "bayesnas/autodiff/ops.hpp"
#include "bayesnas/error.hpp"

namespace bayesnas {

enum class LayerType { non_bayesian, bayesian };

inline std::string_view to_string(LayerType t) {
  return t == LayerType::bayesian ? "bayesian" : "non_bayesian";
}

inline LayerType parse_layer_type(std::string_view s) {
  if (s == "bayesian") return LayerType::bayesian;
  if (s == "non_bayesian") return LayerType::non_bayesian;
  throw ConfigError("unknown layer type '" + std::string(s) + "'");
}

/// Candidate axes searched for one layer.
enum class Axis : std::size_t { expansion = 0, activation = 1, layer_type = 2, kernel = 3 };

inline std::string_view to_string(Axis a) {
  switch (a) {
    case Axis::expansion: return "expansion";
    case Axis::activation: return "activation";
    case Axis::layer_type: return "layer_type";
    case Axis::kernel: return "kernel";
  }
  return "?";
}

struct LayerCandidates {
  std::vector<double> expansions;
  std::vector<ActivationKind> activations;
  std::vector<LayerType> layer_types;
  std::vector<int> kernel_sizes;  // empty for linear layers

  std::size_t axis_count() const { return kernel_sizes.empty() ? 3 : 4; }

  std::size_t axis_size(Axis a) const {
    switch (a) {
      case Axis::expansion: return expansions.size();
      case Axis::activation: return activations.size();
      case Axis::layer_type: return layer_types.size();
      case Axis::kernel: return kernel_sizes.size();
    }
    return 0;
  }

  void validate() const {
    if (expansions.empty() || activations.empty() || layer_types.empty()) {
      throw ConfigError("candidate lists must be non-empty");
    }
    for (double e : expansions)
      if (!(e > 0.0)) throw ConfigError("expansion factors must be positive");
    for (int k : kernel_sizes)
      if (k <= 0 || k % 2 == 0) throw ConfigError("kernel sizes must be odd and positive");
  }
};

inline const std::vector<ActivationKind>& searched_activations() {
  static const std::vector<ActivationKind> acts{ActivationKind::relu,    ActivationKind::elu,
                                                ActivationKind::selu,    ActivationKind::sigmoid,
                                                ActivationKind::relu6,   ActivationKind::leaky_relu};
  return acts;
}

// Expansion factors for the LeNet5 and MLP templates.
inline const std::vector<double>& mnist_expansions() {
  static const std::vector<double> e{0.5, 1.0, 1.5, 2.0, 4.0, 6.0, 8.0};
  return e;
}

// Narrower range used by the residual template.
inline const std::vector<double>& resnet_expansions() {
  static const std::vector<double> e{0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5};
  return e;
}

inline LayerCandidates make_candidates(std::vector<double> expansions, bool conv) {
  LayerCandidates c;
  c.expansions = std::move(expansions);
  c.activations = searched_activations();
  c.layer_types = {LayerType::non_bayesian, LayerType::bayesian};
  if (conv) c.kernel_sizes = {1, 3, 5};
  return c;
}

/// Number of distinct choices for one layer: product of list lengths, with the
/// kernel list counted only when present.
inline std::uint64_t count_layer_options(const LayerCandidates& c) {
  std::uint64_t n = c.expansions.size() * c.activations.size() * c.layer_types.size();
  if (!c.kernel_sizes.empty()) n *= c.kernel_sizes.size();
  return n;
}

/// Arbitrary-precision unsigned integer, just enough for products of counts.
class BigUint {
 public:
  BigUint(std::uint64_t v = 0) {
    while (v) {
      limbs_.push_back(static_cast<std::uint32_t>(v % kBase));
      v /= kBase;
    }
  }

  BigUint& operator*=(std::uint64_t m) {
    if (m == 0 || limbs_.empty()) {
      limbs_.clear();
      return *this;
    }
    unsigned __int128 carry = 0;
    for (auto& l : limbs_) {
      unsigned __int128 cur = static_cast<unsigned __int128>(l) * m + carry;
      l = static_cast<std::uint32_t>(cur % kBase);
      carry = cur / kBase;
    }
    while (carry) {
      limbs_.push_back(static_cast<std::uint32_t>(carry % kBase));
      carry /= kBase;
    }
    return *this;
  }

  std::string to_string() const {
    if (limbs_.empty()) return "0";
    std::string s = std::to_string(limbs_.back());
    for (std::size_t i = limbs_.size() - 1; i-- > 0;) {
      std::string part = std::to_string(limbs_[i]);
      s += std::string(9 - part.size(), '0') + part;
    }
    return s;
  }

  bool operator==(const BigUint& o) const { return limbs_ == o.limbs_; }

 private:
  static constexpr std::uint64_t kBase = 1000000000ULL;
  std::vector<std::uint32_t> limbs_;  // little-endian base 1e9
};

/// Candidate lists for every layer of a template network.
struct CandidateSpace {
  std::vector<LayerCandidates> layers;

  std::size_t size() const { return layers.size(); }
  const LayerCandidates& operator[](std::size_t i) const { return layers.at(i); }
};

inline BigUint total_combinations(const CandidateSpace& space) {
  BigUint total(1);
  for (const auto& l : space.layers) total *= count_layer_options(l);
  return total;
}

struct LayerSelection {
  std::size_t expansion = 0;
  std::size_t activation = 0;
  std::size_t layer_type = 0;
  std::size_t kernel = 0;

  std::size_t get(Axis a) const {
    switch (a) {
      case Axis::expansion: return expansion;
      case Axis::activation: return activation;
      case Axis::layer_type: return layer_type;
      case Axis::kernel: return kernel;
    }
    return 0;
  }
  void set(Axis a, std::size_t v) {
    switch (a) {
      case Axis::expansion: expansion = v; break;
      case Axis::activation: activation = v; break;
      case Axis::layer_type: layer_type = v; break;
      case Axis::kernel: kernel = v; break;
    }
  }
  bool operator==(const LayerSelection&) const = default;
};

struct ArchitectureSelection {
  std::vector<LayerSelection> layers;
  bool operator==(const ArchitectureSelection&) const = default;
};

inline void validate_selection(const CandidateSpace& space, const ArchitectureSelection& sel) {
  if (sel.layers.size() != space.size()) {
    throw SelectionError("selection has " + std::to_string(sel.layers.size()) + " layers, search space has " +
                         std::to_string(space.size()));
  }
  for (std::size_t l = 0; l < space.size(); ++l) {
    const auto& c = space[l];
    for (std::size_t a = 0; a < c.axis_count(); ++a) {
      const Axis axis = static_cast<Axis>(a);
      if (sel.layers[l].get(axis) >= c.axis_size(axis)) {
        throw SelectionError("layer " + std::to_string(l) + " " + std::string(to_string(axis)) + " index " +
                             std::to_string(sel.layers[l].get(axis)) + " out of range");
      }
    }
    if (c.kernel_sizes.empty() && sel.layers[l].kernel != 0) {
      throw SelectionError("layer " + std::to_string(l) + " has no kernel axis");
    }
  }
}

/// Index of the first layer of the maximal all-Bayesian suffix (L if none).
inline std::size_t bayes_suffix_start(const CandidateSpace& space, const ArchitectureSelection& sel) {
  std::size_t s = sel.layers.size();
  while (s > 0 && space[s - 1].layer_types.at(sel.layers[s - 1].layer_type) == LayerType::bayesian) --s;
  return s;
}

}  // namespace bayesnas
