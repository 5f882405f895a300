#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "bayesnas/autodiff/tensor.hpp"
#include "bayesnas/error.hpp"
#include "bayesnas/searchspace/candidates.hpp"

namespace bayesnas {

enum class LayerKind { conv, linear, residual_conv };

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::linear;
  std::size_t base_channels = 0;
  std::size_t stride = 1;
  int block = -1;  // residual block id, -1 outside blocks

  bool is_conv() const { return kind != LayerKind::linear; }
};

/// How spatial feature maps become a feature vector before the first linear layer.
enum class HeadTransition { flatten, global_pool };

struct BackboneSpec {
  std::string name;
  std::vector<LayerSpec> layers;
  HeadTransition transition = HeadTransition::flatten;
  Shape nominal_input;  // per-example, used by shape checks
  std::size_t nominal_classes = 10;

  std::size_t size() const { return layers.size(); }
};

inline BackboneSpec lenet5_backbone() {
  BackboneSpec b;
  b.name = "lenet5";
  b.layers = {{"Conv0", LayerKind::conv, 64, 2},
              {"Conv1", LayerKind::conv, 64, 2},
              {"Linear0", LayerKind::linear, 128, 1},
              {"Linear1", LayerKind::linear, 128, 1},
              {"Linear2", LayerKind::linear, 10, 1}};
  b.transition = HeadTransition::flatten;
  b.nominal_input = {1, 28, 28};
  b.nominal_classes = 10;
  return b;
}

inline BackboneSpec mlp_backbone() {
  BackboneSpec b;
  b.name = "mlp";
  b.layers = {{"Linear0", LayerKind::linear, 32, 1},
              {"Linear1", LayerKind::linear, 32, 1},
              {"Linear2", LayerKind::linear, 32, 1},
              {"Linear3", LayerKind::linear, 2, 1}};
  b.nominal_input = {13};
  b.nominal_classes = 2;
  return b;
}

/// Four residual blocks of three conv layers (32/64/128/256 channels, first
/// layer of each block strided), then global pooling and a linear classifier.
inline BackboneSpec resnet_backbone() {
  BackboneSpec b;
  b.name = "resnet12";
  const std::size_t widths[] = {32, 64, 128, 256};
  for (int blk = 0; blk < 4; ++blk)
    for (int l = 0; l < 3; ++l) {
      b.layers.push_back({"Block" + std::to_string(blk) + "_Layer" + std::to_string(l), LayerKind::residual_conv,
                          widths[blk], l == 0 ? std::size_t{2} : std::size_t{1}, blk});
    }
  b.layers.push_back({"Linear0", LayerKind::linear, 10, 1});
  b.transition = HeadTransition::global_pool;
  b.nominal_input = {3, 32, 32};
  b.nominal_classes = 10;
  return b;
}

inline BackboneSpec backbone_by_name(std::string_view name) {
  if (name == "lenet5") return lenet5_backbone();
  if (name == "mlp") return mlp_backbone();
  if (name == "resnet12" || name == "resnet") return resnet_backbone();
  throw ConfigError("unknown backbone '" + std::string(name) + "' (expected lenet5, mlp or resnet12)");
}

/// Default per-layer candidate lists for a backbone.
inline CandidateSpace default_candidates(const BackboneSpec& b) {
  const auto& exps = b.name == "resnet12" ? resnet_expansions() : mnist_expansions();
  CandidateSpace space;
  for (const auto& l : b.layers) space.layers.push_back(make_candidates(exps, l.is_conv()));
  return space;
}

/// Selection of a fixed architecture: given expansion / activation / kernel
/// values, with the last `n_bayes` layers Bayesian.
inline ArchitectureSelection fixed_selection(const CandidateSpace& space, double expansion, ActivationKind act,
                                             int kernel, std::size_t n_bayes) {
  ArchitectureSelection sel;
  const std::size_t L = space.size();
  if (n_bayes > L) throw ConfigError("cannot make more layers Bayesian than the network has");
  for (std::size_t l = 0; l < L; ++l) {
    const auto& c = space[l];
    LayerSelection s;
    auto find = [&](const auto& list, const auto& v, const char* what) {
      for (std::size_t i = 0; i < list.size(); ++i)
        if (list[i] == v) return i;
      throw ConfigError(std::string("value not in candidate list for ") + what);
    };
    s.expansion = find(c.expansions, expansion, "expansion");
    s.activation = find(c.activations, act, "activation");
    s.layer_type = find(c.layer_types, l + n_bayes >= L ? LayerType::bayesian : LayerType::non_bayesian, "layer type");
    if (!c.kernel_sizes.empty()) s.kernel = find(c.kernel_sizes, kernel, "kernel");
    sel.layers.push_back(s);
  }
  return sel;
}

}  // namespace bayesnas
