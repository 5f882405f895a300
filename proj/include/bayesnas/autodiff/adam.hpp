#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "bayesnas/autodiff/tensor.hpp"
#include "bayesnas/error.hpp"

namespace bayesnas {

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

/// Adam with bias correction. Moments are keyed by parameter name so that
/// parameters created lazily (or restored from a checkpoint) pick up their
/// own state; each parameter keeps its own step counter and is only updated
/// when it carries a gradient.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(lr >= 0.0)) throw ConfigError("Adam learning rate must be non-negative");
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  double beta1() const { return beta1_; }
  double beta2() const { return beta2_; }
  double eps() const { return eps_; }

  void step(std::span<const NamedTensor> params) {
    for (const auto& [name, tensor] : params) {
      if (!tensor.has_grad()) continue;
      auto& st = state_[name];
      const std::size_t n = tensor.numel();
      if (st.m.empty()) {
        st.m.assign(n, 0.0);
        st.v.assign(n, 0.0);
      } else if (st.m.size() != n) {
        throw DimensionError("Adam state for '" + name + "' has " + std::to_string(st.m.size()) +
                             " entries, parameter has " + std::to_string(n));
      }
      ++st.step;
      const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(st.step));
      const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(st.step));
      Tensor t = tensor;
      auto w = t.mutable_data();
      auto g = tensor.grad();
      for (std::size_t i = 0; i < n; ++i) {
        st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g[i];
        st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g[i] * g[i];
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  static void zero_grad(std::span<const NamedTensor> params) {
    for (const auto& p : params) {
      Tensor t = p.tensor;
      t.zero_grad();
    }
  }

  const std::map<std::string, AdamMoments>& state() const { return state_; }
  std::map<std::string, AdamMoments>& state() { return state_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::map<std::string, AdamMoments> state_;
};

}  // namespace bayesnas
