#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "bayesnas/autodiff/conv.hpp"
#include "bayesnas/autodiff/ops.hpp"
#include "bayesnas/autodiff/tensor.hpp"
#include "bayesnas/rng.hpp"

namespace bayesnas {

enum class ForwardMode {
  train,          // stochastic layers sample, dropout active
  mc_eval,        // same sampling, used for Monte-Carlo prediction
  deterministic,  // Bayesian layers use their means, dropout is identity
};

struct ForwardContext {
  ForwardMode mode = ForwardMode::deterministic;
  Rng* rng = nullptr;

  bool sampling() const { return mode != ForwardMode::deterministic; }
  Rng& require_rng() const {
    if (rng == nullptr) throw UsageError("stochastic forward pass without a random stream");
    return *rng;
  }
};

// softplus^-1(0.05)
inline const double kDefaultRhoInit = std::log(std::expm1(0.05));

inline Tensor sigma_from_rho(const Tensor& rho) { return softplus(rho); }

struct DenseLayer {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]

  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }
};

struct BayesDenseLayer {
  Tensor weight_mu, weight_rho;  // [out x in]
  Tensor bias_mu, bias_rho;      // [out]
  double prior_sigma = 1.0;

  std::size_t in_features() const { return weight_mu.dim(1); }
  std::size_t out_features() const { return weight_mu.dim(0); }
};

struct ConvLayer {
  Tensor weight;  // [o x c x k x k]
  Tensor bias;    // [o]
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t kernel() const { return weight.dim(2); }
};

struct BayesConvLayer {
  Tensor weight_mu, weight_rho;
  Tensor bias_mu, bias_rho;
  std::size_t stride = 1;
  std::size_t padding = 0;
  double prior_sigma = 1.0;

  std::size_t kernel() const { return weight_mu.dim(2); }
};

struct DropoutLayer {
  double p = 0.5;
  bool active_at_inference = true;
};

inline Tensor dense_forward(const DenseLayer& layer, const Tensor& x) {
  return linear(x, layer.weight, layer.bias);
}

inline Tensor conv_forward(const ConvLayer& layer, const Tensor& x) {
  return conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding);
}

/// Local reparameterization: samples the pre-activation from
/// N(x mu^T + b_mu, (x*x) sigma^2^T + sigma_b^2) with one fresh eps per call.
inline Tensor bayes_dense_forward_lrt(const BayesDenseLayer& layer, const Tensor& x, Rng& rng) {
  Tensor mean = linear(x, layer.weight_mu, layer.bias_mu);
  Tensor var = linear(square(x), square(sigma_from_rho(layer.weight_rho)),
                      square(sigma_from_rho(layer.bias_rho)));
  return gaussian_reparam(mean, sqrt(var), standard_normal(mean.shape(), rng));
}

inline Tensor bayes_dense_mean(const BayesDenseLayer& layer, const Tensor& x) {
  return linear(x, layer.weight_mu, layer.bias_mu);
}

inline Tensor bayes_conv_forward_lrt(const BayesConvLayer& layer, const Tensor& x, Rng& rng) {
  Tensor mean = conv2d(x, layer.weight_mu, layer.bias_mu, layer.stride, layer.padding);
  Tensor var = conv2d(square(x), square(sigma_from_rho(layer.weight_rho)),
                      square(sigma_from_rho(layer.bias_rho)), layer.stride, layer.padding);
  return gaussian_reparam(mean, sqrt(var), standard_normal(mean.shape(), rng));
}

inline Tensor bayes_conv_mean(const BayesConvLayer& layer, const Tensor& x) {
  return conv2d(x, layer.weight_mu, layer.bias_mu, layer.stride, layer.padding);
}

/// Closed-form KL of one Gaussian N(mu, sigma^2) against N(0, prior^2).
inline double gaussian_kl(double mu, double sigma, double prior_sigma) {
  return std::log(prior_sigma / sigma) + (sigma * sigma + mu * mu) / (2.0 * prior_sigma * prior_sigma) - 0.5;
}

inline Tensor kl_to_prior(const BayesDenseLayer& layer) {
  return add(kl_gaussian(layer.weight_mu, layer.weight_rho, layer.prior_sigma),
             kl_gaussian(layer.bias_mu, layer.bias_rho, layer.prior_sigma));
}

inline Tensor kl_to_prior(const BayesConvLayer& layer) {
  return add(kl_gaussian(layer.weight_mu, layer.weight_rho, layer.prior_sigma),
             kl_gaussian(layer.bias_mu, layer.bias_rho, layer.prior_sigma));
}

inline Tensor dropout_forward(const DropoutLayer& layer, const Tensor& x, ForwardMode mode, Rng* rng) {
  if (layer.p < 0.0 || layer.p >= 1.0) throw ConfigError("dropout probability must be in [0,1)");
  if (mode == ForwardMode::deterministic) return x;
  if (mode == ForwardMode::mc_eval && !layer.active_at_inference) return x;
  if (layer.p == 0.0) return x;
  if (rng == nullptr) throw UsageError("dropout in sampling mode without a random stream");
  return dropout(x, layer.p, *rng);
}

// ---------------------------------------------------------------------------
// Initialization

inline std::vector<double> kaiming_uniform(std::size_t n, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return v;
}

inline std::vector<double> bias_uniform(std::size_t n, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return v;
}

/// Named, lazily created trainable tensors.
///
/// Each entry is initialized from a stream derived from (seed, name), so the
/// values do not depend on creation order.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  template <class Init>
  Tensor get_or_create(const std::string& name, const Shape& shape, Init&& init) {
    auto it = params_.find(name);
    if (it != params_.end()) {
      if (it->second.shape() != shape) {
        throw DimensionError("parameter '" + name + "' exists with shape " + shape_str(it->second.shape()) +
                             ", requested " + shape_str(shape));
      }
      return it->second;
    }
    Rng rng(seed_ ^ hash_name(name), 0x7A11);
    Tensor t = Tensor::parameter(shape, init(shape_numel(shape), rng));
    params_.emplace(name, t);
    return t;
  }

  Tensor weight(const std::string& name, const Shape& shape, std::size_t fan_in) {
    return get_or_create(name, shape, [fan_in](std::size_t n, Rng& r) { return kaiming_uniform(n, fan_in, r); });
  }
  Tensor bias(const std::string& name, std::size_t n_out, std::size_t fan_in) {
    return get_or_create(name, Shape{n_out}, [fan_in](std::size_t n, Rng& r) { return bias_uniform(n, fan_in, r); });
  }
  Tensor constant(const std::string& name, const Shape& shape, double value) {
    return get_or_create(name, shape, [value](std::size_t n, Rng&) { return std::vector<double>(n, value); });
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }

  // Sorted by name.
  std::vector<NamedTensor> named() const {
    std::vector<NamedTensor> out;
    out.reserve(params_.size());
    for (const auto& [k, v] : params_) out.push_back({k, v});
    return out;
  }

  void insert(const std::string& name, Tensor t) { params_[name] = std::move(t); }

 private:
  std::uint64_t seed_;
  std::map<std::string, Tensor> params_;
};

}  // namespace bayesnas
