#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bayesnas/autodiff/ops.hpp"
#include "bayesnas/nn/layers.hpp"
#include "bayesnas/nn/network.hpp"
#include "bayesnas/searchspace/backbone.hpp"
#include "bayesnas/searchspace/candidates.hpp"

namespace bayesnas {

/// Per-layer, per-axis probability vectors from the controller; used to
/// attach straight-through gates to the selected candidates.
using AxisProbabilities = std::vector<std::vector<Tensor>>;

struct ResolvedLayer {
  std::string name;
  LayerKind kind = LayerKind::linear;
  std::size_t width = 0;
  double expansion = 1.0;
  ActivationKind activation = ActivationKind::relu;
  int kernel = 0;
  bool selected_bayesian = false;
  bool bayesian = false;  // after the suffix rule
};

struct AssembledNetwork {
  Network network;
  std::size_t bayes_suffix_start = 0;
  std::vector<ResolvedLayer> layers;
  Shape input_shape;
  std::size_t num_classes = 0;
};

struct AssembleOptions {
  ParameterStore* store = nullptr;         // shared candidate parameters; fresh store when null
  const AxisProbabilities* gates = nullptr;
  Shape input_shape;                       // per example; backbone nominal when empty
  std::size_t num_classes = 0;             // backbone nominal when 0
  double prior_sigma = 1.0;
  double dropout_p = 0.0;                  // > 0 inserts dropout after every hidden stage
  std::uint64_t seed = 0;                  // for the fresh store
};

/// round-half-up with a floor of 1
inline std::size_t expanded_width(std::size_t base, double expansion) {
  const double w = std::floor(static_cast<double>(base) * expansion + 0.5);
  return w < 1.0 ? 1 : static_cast<std::size_t>(w);
}

namespace detail {

inline std::unique_ptr<LayerModule> make_layer(const LayerSpec& spec, std::size_t layer_index, const Shape& in,
                                               const ResolvedLayer& r, ParameterStore& store, double prior_sigma) {
  const std::string kind = spec.is_conv() ? "conv" : "dense";
  std::string prefix = "L" + std::to_string(layer_index) + "." + spec.name + "/" + kind;
  WeightLayer layer;
  if (spec.is_conv()) {
    if (in.size() != 3) throw DimensionError(spec.name + ": conv layer needs [c x h x w] input, got " + shape_str(in));
    const std::size_t c = in[0], k = static_cast<std::size_t>(r.kernel);
    prefix += "_in" + std::to_string(c) + "_out" + std::to_string(r.width) + "_k" + std::to_string(k);
    const Shape wshape{r.width, c, k, k};
    const std::size_t fan_in = c * k * k;
    Tensor w = store.weight(prefix + "/weight", wshape, fan_in);
    Tensor b = store.bias(prefix + "/bias", r.width, fan_in);
    const std::size_t pad = k / 2;
    if (r.bayesian) {
      BayesConvLayer l{w, store.constant(prefix + "/weight_rho", wshape, kDefaultRhoInit), b,
                       store.constant(prefix + "/bias_rho", Shape{r.width}, kDefaultRhoInit), spec.stride, pad,
                       prior_sigma};
      layer = l;
    } else {
      layer = ConvLayer{w, b, spec.stride, pad};
    }
  } else {
    if (in.size() != 1) throw DimensionError(spec.name + ": dense layer needs flat input, got " + shape_str(in));
    const std::size_t f = in[0];
    prefix += "_in" + std::to_string(f) + "_out" + std::to_string(r.width);
    const Shape wshape{r.width, f};
    Tensor w = store.weight(prefix + "/weight", wshape, f);
    Tensor b = store.bias(prefix + "/bias", r.width, f);
    if (r.bayesian) {
      layer = BayesDenseLayer{w, store.constant(prefix + "/weight_rho", wshape, kDefaultRhoInit), b,
                              store.constant(prefix + "/bias_rho", Shape{r.width}, kDefaultRhoInit), prior_sigma};
    } else {
      layer = DenseLayer{w, b};
    }
  }
  return std::make_unique<LayerModule>(spec.name, std::move(layer), r.activation, prefix);
}

inline Tensor selection_gate(const AxisProbabilities& gates, std::size_t l, const LayerCandidates& c,
                             const LayerSelection& s) {
  if (l >= gates.size() || gates[l].size() != c.axis_count()) {
    throw SelectionError("gate probabilities do not match the search space at layer " + std::to_string(l));
  }
  Tensor g = straight_through_gate(gates[l][0], s.get(Axis::expansion));
  for (std::size_t a = 1; a < c.axis_count(); ++a) {
    g = mul_scalar(g, straight_through_gate(gates[l][a], s.get(static_cast<Axis>(a))));
  }
  return g;
}

}  // namespace detail

/// Resolves a selection into concrete per-layer choices, applying the
/// maximal-Bayesian-suffix rule and pinning the classifier width.
inline std::vector<ResolvedLayer> resolve_selection(const BackboneSpec& backbone, const CandidateSpace& space,
                                                    const ArchitectureSelection& sel, std::size_t num_classes) {
  if (space.size() != backbone.size()) {
    throw SelectionError("search space has " + std::to_string(space.size()) + " layers, backbone " +
                         std::to_string(backbone.size()));
  }
  validate_selection(space, sel);
  const std::size_t L = backbone.size();
  const std::size_t suffix = bayes_suffix_start(space, sel);
  std::vector<ResolvedLayer> out;
  for (std::size_t l = 0; l < L; ++l) {
    const auto& spec = backbone.layers[l];
    const auto& c = space[l];
    const auto& s = sel.layers[l];
    if (spec.is_conv() && c.kernel_sizes.empty()) throw SelectionError(spec.name + ": conv layer without kernel candidates");
    ResolvedLayer r;
    r.name = spec.name;
    r.kind = spec.kind;
    r.expansion = c.expansions[s.expansion];
    const bool last = l + 1 == L;
    r.width = last ? num_classes : expanded_width(spec.base_channels, r.expansion);
    r.activation = last ? ActivationKind::identity : c.activations[s.activation];
    r.kernel = spec.is_conv() ? c.kernel_sizes[s.kernel] : 0;
    r.selected_bayesian = c.layer_types[s.layer_type] == LayerType::bayesian;
    r.bayesian = l >= suffix;
    out.push_back(r);
  }
  return out;
}

inline AssembledNetwork assemble(const BackboneSpec& backbone, const CandidateSpace& space,
                                 const ArchitectureSelection& sel, const AssembleOptions& opts = {}) {
  AssembledNetwork net;
  net.input_shape = opts.input_shape.empty() ? backbone.nominal_input : opts.input_shape;
  net.num_classes = opts.num_classes == 0 ? backbone.nominal_classes : opts.num_classes;
  net.layers = resolve_selection(backbone, space, sel, net.num_classes);
  net.bayes_suffix_start = bayes_suffix_start(space, sel);

  ParameterStore local(opts.seed);
  ParameterStore& store = opts.store ? *opts.store : local;

  Shape shape = net.input_shape;
  auto add_dropout = [&](bool hidden) {
    if (hidden && opts.dropout_p > 0.0) net.network.add(std::make_unique<DropoutModule>(DropoutLayer{opts.dropout_p, true}));
  };
  const std::size_t L = backbone.size();
  std::size_t l = 0;
  while (l < L) {
    const auto& spec = backbone.layers[l];
    if (!spec.is_conv() && shape.size() != 1) {
      std::unique_ptr<Module> t;
      if (backbone.transition == HeadTransition::global_pool && shape.size() == 3) {
        t = std::make_unique<GlobalPoolModule>();
      } else {
        t = std::make_unique<FlattenModule>();
      }
      shape = t->output_shape(shape);
      net.network.add(std::move(t));
    }
    if (spec.kind == LayerKind::residual_conv) {
      const int blk = spec.block;
      std::vector<std::unique_ptr<LayerModule>> layers;
      Shape s = shape;
      Shape skip;
      std::size_t first = l;
      while (l < L && backbone.layers[l].kind == LayerKind::residual_conv && backbone.layers[l].block == blk) {
        auto m = detail::make_layer(backbone.layers[l], l, s, net.layers[l], store, opts.prior_sigma);
        if (opts.gates) m->set_gate(detail::selection_gate(*opts.gates, l, space[l], sel.layers[l]));
        s = m->output_shape(s);
        if (l == first) skip = s;
        layers.push_back(std::move(m));
        ++l;
      }
      std::optional<ConvLayer> proj;
      std::string proj_prefix = "B" + std::to_string(blk) + "/proj_in" + std::to_string(skip[0]) + "_out" +
                                std::to_string(s[0]);
      if (layers.size() > 1 && skip[0] != s[0]) {
        proj = ConvLayer{store.weight(proj_prefix + "/weight", Shape{s[0], skip[0], 1, 1}, skip[0]),
                         store.bias(proj_prefix + "/bias", s[0], skip[0]), 1, 0};
      }
      auto block = std::make_unique<ResidualBlock>("Block" + std::to_string(blk), std::move(layers), std::move(proj),
                                                   proj_prefix);
      shape = block->output_shape(shape);
      net.network.add(std::move(block));
      add_dropout(l < L);
      continue;
    }
    auto m = detail::make_layer(spec, l, shape, net.layers[l], store, opts.prior_sigma);
    if (opts.gates) m->set_gate(detail::selection_gate(*opts.gates, l, space[l], sel.layers[l]));
    shape = m->output_shape(shape);
    net.network.add(std::move(m));
    ++l;
    add_dropout(l < L);
  }
  return net;
}

/// Propagates a per-example input shape through the network.
inline Shape shape_check(const AssembledNetwork& net, const Shape& input) { return net.network.output_shape(input); }

}  // namespace bayesnas
