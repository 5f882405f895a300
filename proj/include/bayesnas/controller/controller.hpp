#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "bayesnas/autodiff/ops.hpp"
#include "bayesnas/autodiff/tensor.hpp"
#include "bayesnas/error.hpp"
#include "bayesnas/nn/layers.hpp"
#include "bayesnas/rng.hpp"
#include "bayesnas/searchspace/assemble.hpp"
#include "bayesnas/searchspace/candidates.hpp"

namespace bayesnas {

struct NoiseSchedule {
  double lambda_n = 0.1;
  int warmup_epochs = 20;
  int total_epochs = 100;
  // Divides the post-warmup coefficient by (total - warmup). Off by default.
  bool normalized = false;

  void validate() const {
    if (warmup_epochs < 0 || warmup_epochs > total_epochs) {
      throw ConfigError("noise schedule requires 0 <= warmup_epochs <= total_epochs");
    }
    if (lambda_n < 0.0) throw ConfigError("noise lambda must be non-negative");
  }

  // Multiplier of the positive Gaussian noise after warmup.
  double annealed_coefficient(int epoch) const {
    double c = lambda_n * static_cast<double>(total_epochs - epoch);
    if (normalized && total_epochs > warmup_epochs) c /= static_cast<double>(total_epochs - warmup_epochs);
    return c;
  }
};

struct ControllerShape {
  std::size_t embedding = 256;
  std::size_t hidden = 512;
  std::size_t depth = 4;
};

/// Trainable embedding z -> ReLU MLP trunk -> one affine head per (layer, axis).
class Controller {
 public:
  Controller(const CandidateSpace& space, std::uint64_t seed, ControllerShape shape = {})
      : space_(space), shape_(shape) {
    ParameterStore init(seed);
    z_ = init.get_or_create("controller/z", Shape{1, shape.embedding}, [](std::size_t n, Rng& r) {
      std::vector<double> v(n);
      for (double& x : v) x = r.normal();
      return v;
    });
    std::size_t in = shape.embedding;
    for (std::size_t d = 0; d < shape.depth; ++d) {
      const std::string p = "controller/trunk" + std::to_string(d);
      trunk_.push_back({init.weight(p + "/weight", Shape{shape.hidden, in}, in), init.bias(p + "/bias", shape.hidden, in)});
      in = shape.hidden;
    }
    heads_.resize(space.size());
    for (std::size_t l = 0; l < space.size(); ++l) {
      for (std::size_t a = 0; a < space[l].axis_count(); ++a) {
        const std::size_t k = space[l].axis_size(static_cast<Axis>(a));
        heads_[l].push_back({Tensor::parameter(Shape{k, in}, std::vector<double>(k * in, 0.0)),
                             Tensor::parameter(Shape{k}, std::vector<double>(k, 0.0))});
      }
    }
  }

  const CandidateSpace& space() const { return space_; }
  const ControllerShape& shape() const { return shape_; }

  /// Softmax probability vector for every (layer, axis); recorded on the
  /// active tape if any.
  AxisProbabilities forward() const {
    Tensor h = z_;
    for (const auto& l : trunk_) h = activation(dense_forward(l, h), ActivationKind::relu);
    AxisProbabilities out(heads_.size());
    for (std::size_t l = 0; l < heads_.size(); ++l)
      for (const auto& head : heads_[l]) {
        Tensor logits = dense_forward(head, h);  // [1 x K]
        out[l].push_back(reshape(softmax(logits), Shape{logits.numel()}));
      }
    return out;
  }

  std::vector<NamedTensor> arch_parameters() const {
    std::vector<NamedTensor> p;
    p.push_back({"controller/z", z_});
    for (std::size_t d = 0; d < trunk_.size(); ++d) {
      const std::string n = "controller/trunk" + std::to_string(d);
      p.push_back({n + "/weight", trunk_[d].weight});
      p.push_back({n + "/bias", trunk_[d].bias});
    }
    for (std::size_t l = 0; l < heads_.size(); ++l)
      for (std::size_t a = 0; a < heads_[l].size(); ++a) {
        const std::string n = "controller/head_l" + std::to_string(l) + "_" + std::string(to_string(static_cast<Axis>(a)));
        p.push_back({n + "/weight", heads_[l][a].weight});
        p.push_back({n + "/bias", heads_[l][a].bias});
      }
    return p;
  }

  std::size_t head_parameter_count() const {
    std::size_t n = 0;
    for (const auto& layer : heads_)
      for (const auto& h : layer) n += h.weight.numel() + h.bias.numel();
    return n;
  }

 private:
  CandidateSpace space_;
  ControllerShape shape_;
  Tensor z_;
  std::vector<DenseLayer> trunk_;
  std::vector<std::vector<DenseLayer>> heads_;
};

using ScoreSet = std::vector<std::vector<std::vector<double>>>;

/// Exploration noise on a probability vector. During warmup (epoch <=
/// warmup) the score is pure positive noise lambda * |N(0,1)|; afterwards
/// p + lambda * |N(0,1)| * (total - epoch).
inline std::vector<double> perturb(std::span<const double> p, int epoch, const NoiseSchedule& sched, Rng& rng) {
  if (epoch < 0 || epoch > sched.total_epochs) throw UsageError("perturb: epoch outside [0, total_epochs]");
  std::vector<double> score(p.size());
  if (epoch <= sched.warmup_epochs) {
    for (double& s : score) s = sched.lambda_n * rng.positive_normal();
    return score;
  }
  const double coef = sched.annealed_coefficient(epoch);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double noise = rng.positive_normal();
    score[i] = coef == 0.0 ? p[i] : p[i] + noise * coef;
  }
  return score;
}

inline ScoreSet probabilities_to_scores(const AxisProbabilities& probs) {
  ScoreSet out(probs.size());
  for (std::size_t l = 0; l < probs.size(); ++l)
    for (const auto& p : probs[l]) out[l].emplace_back(p.data().begin(), p.data().end());
  return out;
}

inline ScoreSet perturb_all(const AxisProbabilities& probs, int epoch, const NoiseSchedule& sched, Rng& rng) {
  ScoreSet out(probs.size());
  for (std::size_t l = 0; l < probs.size(); ++l)
    for (const auto& p : probs[l]) out[l].push_back(perturb(p.data(), epoch, sched, rng));
  return out;
}

/// First index of the maximum.
inline std::size_t argmax_first(std::span<const double> v) {
  if (v.empty()) throw SelectionError("argmax of empty score vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline ArchitectureSelection select(const ScoreSet& scores) {
  ArchitectureSelection sel;
  for (const auto& layer : scores) {
    if (layer.size() < 3 || layer.size() > 4) throw SelectionError("each layer needs 3 or 4 score vectors");
    LayerSelection s;
    for (std::size_t a = 0; a < layer.size(); ++a) s.set(static_cast<Axis>(a), argmax_first(layer[a]));
    sel.layers.push_back(s);
  }
  return sel;
}

}  // namespace bayesnas
