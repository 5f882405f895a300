#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "bayesnas/autodiff/ops.hpp"
#include "bayesnas/nn/layers.hpp"

namespace bayesnas {

/// One stage of a feed-forward network. Shapes passed to output_shape() and
/// macs() exclude the batch dimension.
class Module {
 public:
  virtual ~Module() = default;

  virtual Tensor forward(const Tensor& x, const ForwardContext& ctx) const = 0;
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual std::uint64_t macs(const Shape& /*in*/) const { return 0; }
  virtual bool stochastic() const { return false; }
  virtual void collect_parameters(std::vector<NamedTensor>& /*out*/) const {}
  virtual void collect_kl(std::vector<Tensor>& /*out*/) const {}
  virtual std::string describe() const = 0;
};

using WeightLayer = std::variant<DenseLayer, BayesDenseLayer, ConvLayer, BayesConvLayer>;

/// A dense or convolutional layer followed by an activation, optionally
/// scaled by a straight-through architecture gate (value 1).
class LayerModule final : public Module {
 public:
  LayerModule(std::string name, WeightLayer layer, ActivationKind act, std::string param_prefix)
      : name_(std::move(name)), layer_(std::move(layer)), act_(act), prefix_(std::move(param_prefix)) {}

  void set_gate(Tensor gate) { gate_ = std::move(gate); }
  const Tensor& gate() const { return gate_; }

  const WeightLayer& layer() const { return layer_; }
  ActivationKind activation_kind() const { return act_; }
  const std::string& name() const { return name_; }
  bool bayesian() const {
    return std::holds_alternative<BayesDenseLayer>(layer_) || std::holds_alternative<BayesConvLayer>(layer_);
  }
  bool is_conv() const {
    return std::holds_alternative<ConvLayer>(layer_) || std::holds_alternative<BayesConvLayer>(layer_);
  }

  Tensor forward(const Tensor& x, const ForwardContext& ctx) const override {
    Tensor y = std::visit(
        [&](const auto& l) -> Tensor {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, DenseLayer>) {
            return dense_forward(l, x);
          } else if constexpr (std::is_same_v<L, ConvLayer>) {
            return conv_forward(l, x);
          } else if constexpr (std::is_same_v<L, BayesDenseLayer>) {
            return ctx.sampling() ? bayes_dense_forward_lrt(l, x, ctx.require_rng()) : bayes_dense_mean(l, x);
          } else {
            return ctx.sampling() ? bayes_conv_forward_lrt(l, x, ctx.require_rng()) : bayes_conv_mean(l, x);
          }
        },
        layer_);
    y = activation(y, act_);
    if (gate_.defined()) y = mul_scalar(y, gate_);
    return y;
  }

  Shape output_shape(const Shape& in) const override {
    return std::visit(
        [&](const auto& l) -> Shape {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, DenseLayer> || std::is_same_v<L, BayesDenseLayer>) {
            if (in.size() != 1 || in[0] != l.in_features()) {
              throw DimensionError(name_ + ": expects " + std::to_string(l.in_features()) + " features, got " +
                                   shape_str(in));
            }
            return Shape{l.out_features()};
          } else {
            const Tensor& w = weight_of(l);
            if (in.size() != 3 || in[0] != w.dim(1)) {
              throw DimensionError(name_ + ": expects " + std::to_string(w.dim(1)) + " channels, got " +
                                   shape_str(in));
            }
            return Shape{w.dim(0), detail::conv_out_size(in[1], w.dim(2), l.stride, l.padding),
                         detail::conv_out_size(in[2], w.dim(2), l.stride, l.padding)};
          }
        },
        layer_);
  }

  // Multiply-accumulates per example; the LRT variance path doubles the cost.
  std::uint64_t macs(const Shape& in) const override {
    const Shape out = output_shape(in);
    std::uint64_t base = 0;
    if (is_conv()) {
      const Tensor& w = std::holds_alternative<ConvLayer>(layer_) ? std::get<ConvLayer>(layer_).weight
                                                                  : std::get<BayesConvLayer>(layer_).weight_mu;
      base = static_cast<std::uint64_t>(out[0] * out[1] * out[2]) * (w.dim(1) * w.dim(2) * w.dim(3));
    } else {
      base = static_cast<std::uint64_t>(in[0]) * out[0];
    }
    return bayesian() ? 2 * base : base;
  }

  bool stochastic() const override { return bayesian(); }

  void collect_parameters(std::vector<NamedTensor>& out) const override {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, DenseLayer> || std::is_same_v<L, ConvLayer>) {
            out.push_back({prefix_ + "/weight", l.weight});
            out.push_back({prefix_ + "/bias", l.bias});
          } else {
            out.push_back({prefix_ + "/weight", l.weight_mu});
            out.push_back({prefix_ + "/bias", l.bias_mu});
            out.push_back({prefix_ + "/weight_rho", l.weight_rho});
            out.push_back({prefix_ + "/bias_rho", l.bias_rho});
          }
        },
        layer_);
  }

  void collect_kl(std::vector<Tensor>& out) const override {
    if (const auto* l = std::get_if<BayesDenseLayer>(&layer_)) out.push_back(kl_to_prior(*l));
    if (const auto* l = std::get_if<BayesConvLayer>(&layer_)) out.push_back(kl_to_prior(*l));
  }

  std::string describe() const override {
    std::string kind = is_conv() ? "conv" : "dense";
    return name_ + "(" + (bayesian() ? "bayes_" : "") + kind + "," + std::string(to_string(act_)) + ")";
  }

 private:
  static const Tensor& weight_of(const ConvLayer& l) { return l.weight; }
  static const Tensor& weight_of(const BayesConvLayer& l) { return l.weight_mu; }

  std::string name_;
  WeightLayer layer_;
  ActivationKind act_;
  std::string prefix_;
  Tensor gate_;
};

class FlattenModule final : public Module {
 public:
  Tensor forward(const Tensor& x, const ForwardContext&) const override { return flatten(x); }
  Shape output_shape(const Shape& in) const override { return Shape{shape_numel(in)}; }
  std::string describe() const override { return "flatten"; }
};

class GlobalPoolModule final : public Module {
 public:
  Tensor forward(const Tensor& x, const ForwardContext&) const override { return global_avg_pool(x); }
  Shape output_shape(const Shape& in) const override {
    if (in.size() != 3) throw DimensionError("global pool expects [c x h x w], got " + shape_str(in));
    return Shape{in[0]};
  }
  std::string describe() const override { return "global_avg_pool"; }
};

class DropoutModule final : public Module {
 public:
  explicit DropoutModule(DropoutLayer layer) : layer_(layer) {}
  Tensor forward(const Tensor& x, const ForwardContext& ctx) const override {
    return dropout_forward(layer_, x, ctx.mode, ctx.rng);
  }
  Shape output_shape(const Shape& in) const override { return in; }
  bool stochastic() const override { return layer_.p > 0.0; }
  std::string describe() const override { return "dropout(" + std::to_string(layer_.p) + ")"; }
  const DropoutLayer& layer() const { return layer_; }

 private:
  DropoutLayer layer_;
};

/// Three searched layers with a skip from the first layer's output to the
/// last layer's output; a deterministic 1x1 projection bridges width changes.
class ResidualBlock final : public Module {
 public:
  ResidualBlock(std::string name, std::vector<std::unique_ptr<LayerModule>> layers,
                std::optional<ConvLayer> projection, std::string projection_prefix)
      : name_(std::move(name)), layers_(std::move(layers)), projection_(std::move(projection)),
        proj_prefix_(std::move(projection_prefix)) {
    if (layers_.empty()) throw UsageError("residual block without layers");
  }

  Tensor forward(const Tensor& x, const ForwardContext& ctx) const override {
    Tensor skip = layers_[0]->forward(x, ctx);
    Tensor y = skip;
    for (std::size_t i = 1; i < layers_.size(); ++i) y = layers_[i]->forward(y, ctx);
    if (layers_.size() == 1) return y;
    if (projection_) skip = conv_forward(*projection_, skip);
    return add(y, skip);
  }

  Shape output_shape(const Shape& in) const override {
    Shape skip = layers_[0]->output_shape(in);
    Shape y = skip;
    for (std::size_t i = 1; i < layers_.size(); ++i) y = layers_[i]->output_shape(y);
    if (projection_) skip = Shape{projection_->weight.dim(0), skip[1], skip[2]};
    if (layers_.size() > 1 && skip != y) {
      throw DimensionError(name_ + ": residual add of " + shape_str(y) + " and " + shape_str(skip));
    }
    return y;
  }

  std::uint64_t macs(const Shape& in) const override {
    std::uint64_t total = 0;
    Shape s = in;
    Shape skip;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      total += layers_[i]->macs(s);
      s = layers_[i]->output_shape(s);
      if (i == 0) skip = s;
    }
    if (projection_) total += static_cast<std::uint64_t>(skip[0]) * skip[1] * skip[2] * projection_->weight.dim(0);
    return total;
  }

  bool stochastic() const override {
    for (const auto& l : layers_)
      if (l->stochastic()) return true;
    return false;
  }

  void collect_parameters(std::vector<NamedTensor>& out) const override {
    for (const auto& l : layers_) l->collect_parameters(out);
    if (projection_) {
      out.push_back({proj_prefix_ + "/weight", projection_->weight});
      out.push_back({proj_prefix_ + "/bias", projection_->bias});
    }
  }

  void collect_kl(std::vector<Tensor>& out) const override {
    for (const auto& l : layers_) l->collect_kl(out);
  }

  std::string describe() const override {
    std::string s = name_ + "{";
    for (const auto& l : layers_) s += l->describe() + ";";
    if (projection_) s += "proj1x1";
    return s + "}";
  }

  const std::vector<std::unique_ptr<LayerModule>>& layers() const { return layers_; }
  bool has_projection() const { return projection_.has_value(); }

 private:
  std::string name_;
  std::vector<std::unique_ptr<LayerModule>> layers_;
  std::optional<ConvLayer> projection_;
  std::string proj_prefix_;
};

/// Ordered stack of modules. The deterministic prefix (everything before the
/// first stochastic module) can be evaluated once and reused across samples.
class Network {
 public:
  Network() = default;
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  void add(std::unique_ptr<Module> m) { modules_.push_back(std::move(m)); }

  std::size_t size() const { return modules_.size(); }
  const Module& module(std::size_t i) const { return *modules_.at(i); }

  Tensor forward(const Tensor& x, const ForwardContext& ctx) const { return forward_range(x, 0, size(), ctx); }

  Tensor forward_range(const Tensor& x, std::size_t begin, std::size_t end, const ForwardContext& ctx) const {
    Tensor y = x;
    for (std::size_t i = begin; i < end; ++i) y = modules_[i]->forward(y, ctx);
    return y;
  }

  std::size_t first_stochastic() const {
    for (std::size_t i = 0; i < modules_.size(); ++i)
      if (modules_[i]->stochastic()) return i;
    return modules_.size();
  }

  bool stochastic() const { return first_stochastic() < size(); }

  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> all;
    for (const auto& m : modules_) m->collect_parameters(all);
    std::vector<NamedTensor> unique;
    std::set<std::string> seen;
    for (auto& p : all)
      if (seen.insert(p.name).second) unique.push_back(std::move(p));
    return unique;
  }

  /// Sum of KL terms of every Bayesian layer (scalar 0 when there are none).
  Tensor kl() const {
    std::vector<Tensor> terms;
    for (const auto& m : modules_) m->collect_kl(terms);
    if (terms.empty()) return Tensor::scalar(0.0);
    Tensor total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = bayesnas::add(total, terms[i]);
    return total;
  }

  Shape output_shape(const Shape& in) const {
    Shape s = in;
    for (const auto& m : modules_) s = m->output_shape(s);
    return s;
  }

  std::vector<std::uint64_t> module_macs(const Shape& in) const {
    std::vector<std::uint64_t> out;
    Shape s = in;
    for (const auto& m : modules_) {
      out.push_back(m->macs(s));
      s = m->output_shape(s);
    }
    return out;
  }

  std::string describe() const {
    std::string s;
    for (const auto& m : modules_) s += (s.empty() ? "" : " -> ") + m->describe();
    return s;
  }

 private:
  std::vector<std::unique_ptr<Module>> modules_;
};

/// N stochastic forward passes sharing one evaluation of the deterministic
/// prefix. Each sample draws from its own child stream of `rng`.
inline std::vector<Tensor> mc_samples(const Network& net, const Tensor& x, std::size_t n, Rng& rng,
                                      ForwardMode mode = ForwardMode::mc_eval) {
  if (n < 1) throw UsageError("mc_forward requires at least one sample");
  const std::size_t split = net.first_stochastic();
  const ForwardContext det{ForwardMode::deterministic, nullptr};
  Tensor prefix = net.forward_range(x, 0, split, det);
  std::vector<Tensor> out;
  out.reserve(n);
  if (split == net.size()) {
    for (std::size_t i = 0; i < n; ++i) out.push_back(prefix);
    return out;
  }
  for (std::size_t i = 0; i < n; ++i) {
    Rng stream = rng.split();
    ForwardContext ctx{mode, &stream};
    out.push_back(net.forward_range(prefix, split, net.size(), ctx));
  }
  return out;
}

/// Samples re-running the whole network each time (no prefix reuse).
inline std::vector<Tensor> mc_samples_full(const Network& net, const Tensor& x, std::size_t n, Rng& rng,
                                           ForwardMode mode = ForwardMode::mc_eval) {
  if (n < 1) throw UsageError("mc_forward requires at least one sample");
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng stream = rng.split();
    ForwardContext ctx{mode, &stream};
    out.push_back(net.forward(x, ctx));
  }
  return out;
}

/// Stacked outputs [N x b x c] of N stochastic passes (values only).
inline Tensor mc_forward(const Network& net, const Tensor& x, std::size_t n, Rng& rng) {
  NoGrad guard;
  auto samples = mc_samples(net, x, n, rng);
  Shape shape{n};
  for (auto d : samples[0].shape()) shape.push_back(d);
  std::vector<double> v;
  v.reserve(shape_numel(shape));
  for (const auto& s : samples) v.insert(v.end(), s.data().begin(), s.data().end());
  return Tensor(shape, std::move(v));
}

}  // namespace bayesnas
