#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "bayesnas/autodiff/tensor.hpp"
#include "bayesnas/error.hpp"
#include "bayesnas/rng.hpp"

namespace bayesnas {

enum class ActivationKind { relu, elu, selu, sigmoid, relu6, leaky_relu, identity };

inline constexpr double kSeluLambda = 1.0507009873554804934193349852946;
inline constexpr double kSeluAlpha = 1.6732632423543772848170429916717;
inline constexpr double kLeakySlope = 0.01;

inline std::string_view to_string(ActivationKind k) {
  switch (k) {
    case ActivationKind::relu: return "relu";
    case ActivationKind::elu: return "elu";
    case ActivationKind::selu: return "selu";
    case ActivationKind::sigmoid: return "sigmoid";
    case ActivationKind::relu6: return "relu6";
    case ActivationKind::leaky_relu: return "leaky_relu";
    case ActivationKind::identity: return "identity";
  }
  return "?";
}

inline ActivationKind parse_activation(std::string_view s) {
  for (auto k : {ActivationKind::relu, ActivationKind::elu, ActivationKind::selu,
                 ActivationKind::sigmoid, ActivationKind::relu6, ActivationKind::leaky_relu,
                 ActivationKind::identity}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown activation kind '" + std::string(s) + "'");
}

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline double softplus(double x) {
  // log(1 + e^x) without overflow
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// NaN inputs propagate so divergence is not masked by clamping branches.
inline double activate(ActivationKind k, double x) {
  if (std::isnan(x)) return x;
  switch (k) {
    case ActivationKind::relu: return x > 0.0 ? x : 0.0;
    case ActivationKind::elu: return x > 0.0 ? x : std::expm1(x);
    case ActivationKind::selu: return kSeluLambda * (x > 0.0 ? x : kSeluAlpha * std::expm1(x));
    case ActivationKind::sigmoid: return sigmoid(x);
    case ActivationKind::relu6: return std::clamp(x, 0.0, 6.0);
    case ActivationKind::leaky_relu: return x > 0.0 ? x : kLeakySlope * x;
    case ActivationKind::identity: return x;
  }
  return x;
}

// Derivative from input x and output y; 0 at kinks.
inline double activate_grad(ActivationKind k, double x, double y) {
  switch (k) {
    case ActivationKind::relu: return x > 0.0 ? 1.0 : 0.0;
    case ActivationKind::elu: return x > 0.0 ? 1.0 : (x < 0.0 ? y + 1.0 : 1.0);
    case ActivationKind::selu:
      return x > 0.0 ? kSeluLambda : (x < 0.0 ? y + kSeluLambda * kSeluAlpha : 0.0);
    case ActivationKind::sigmoid: return y * (1.0 - y);
    case ActivationKind::relu6: return (x > 0.0 && x < 6.0) ? 1.0 : 0.0;
    case ActivationKind::leaky_relu: return x > 0.0 ? 1.0 : (x < 0.0 ? kLeakySlope : 0.0);
    case ActivationKind::identity: return 1.0;
  }
  return 1.0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(v), {a, b}, [a, b](detail::Node* o) {
    return [a, b, o]() {
      for (const auto* p : {&a, &b}) {
        if (!p->requires_grad()) continue;
        auto& g = p->impl()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
      }
    };
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
  return detail::make_result(a.shape(), std::move(v), {a, b}, [a, b](detail::Node* o) {
    return [a, b, o]() {
      if (a.requires_grad()) {
        auto& g = a.impl()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
      }
      if (b.requires_grad()) {
        auto& g = b.impl()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o->grad[i];
      }
    };
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(v), {a, b}, [a, b](detail::Node* o) {
    return [a, b, o]() {
      if (a.requires_grad()) {
        auto& g = a.impl()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * b[i];
      }
      if (b.requires_grad()) {
        auto& g = b.impl()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * a[i];
      }
    };
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * c;
  return detail::make_result(a.shape(), std::move(v), {a}, [a, c](detail::Node* o) {
    return [a, c, o]() {
      auto& g = a.impl()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * c;
    };
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + c;
  return detail::make_result(a.shape(), std::move(v), {a}, [a](detail::Node* o) {
    return [a, o]() {
      auto& g = a.impl()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
    };
  });
}

// a * s where s holds a single value.
inline Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("mul_scalar: scalar operand has shape " + shape_str(s.shape()));
  const double c = s[0];
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * c;
  return detail::make_result(a.shape(), std::move(v), {a, s}, [a, s](detail::Node* o) {
    return [a, s, o]() {
      if (a.requires_grad()) {
        auto& g = a.impl()->grad_buffer();
        const double c = s[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * c;
      }
      if (s.requires_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < a.numel(); ++i) acc += o->grad[i] * a[i];
        s.impl()->accumulate(0, acc);
      }
    };
  });
}

namespace detail {

template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(a[i]);
  return make_result(a.shape(), std::move(v), {a}, [a, df](Node* o) {
    return [a, df, o]() {
      auto& g = a.impl()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * df(a[i], o->value[i]);
    };
  });
}

}  // namespace detail

inline Tensor square(const Tensor& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor sqrt(const Tensor& a) {
  for (double x : a.data()) {
    if (x < 0.0) throw NumericError("sqrt of negative value");
  }
  return detail::unary(a, [](double x) { return std::sqrt(x); },
                       [](double, double y) { return 0.5 / y; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::log(x); },
                       [](double x, double) { return 1.0 / x; });
}

inline Tensor softplus(const Tensor& a) {
  return detail::unary(a, [](double x) { return detail::softplus(x); },
                       [](double x, double) { return detail::sigmoid(x); });
}

inline Tensor activation(const Tensor& x, ActivationKind kind) {
  if (kind == ActivationKind::identity) return x;
  return detail::unary(
      x, [kind](double v) { return detail::activate(kind, v); },
      [kind](double v, double y) { return detail::activate_grad(kind, v, y); });
}

inline Tensor activation(const Tensor& x, std::string_view kind) {
  return activation(x, parse_activation(kind));
}

// ---------------------------------------------------------------------------
// Reductions and shape

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return detail::make_result(Shape{1}, {s}, {a}, [a](detail::Node* o) {
    return [a, o]() {
      auto& g = a.impl()->grad_buffer();
      for (double& gi : g) gi += o->grad[0];
    };
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  return detail::make_result(std::move(shape), a.values(), {a}, [a](detail::Node* o) {
    return [a, o]() {
      auto& g = a.impl()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
    };
  });
}

// [b x ...] -> [b x prod(...)]
inline Tensor flatten(const Tensor& a) {
  if (a.rank() == 2) return a;
  const std::size_t b = a.dim(0);
  return reshape(a, Shape{b, a.numel() / b});
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* brow = B + p * n;
      double* crow = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return detail::make_result(Shape{m, n}, std::move(c), {a, b}, [a, b, m, k, n](detail::Node* o) {
    return [a, b, m, k, n, o]() {
      const double* G = o->grad.data();
      if (a.requires_grad()) {  // dA = dC * B^T
        auto& ga = a.impl()->grad_buffer();
        const double* B = b.data().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
            ga[i * k + p] += acc;
          }
      }
      if (b.requires_grad()) {  // dB = A^T * dC
        auto& gb = b.impl()->grad_buffer();
        const double* A = a.data().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * G[i * n + j];
          }
      }
    };
  });
}

/// x[n x in] * w[out x in]^T + bias[out]. `bias` may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != out) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " for " + std::to_string(out) +
                         " outputs");
  }
  std::vector<double> y(n * out);
  const double* X = x.data().data();
  const double* W = w.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* xr = X + i * in;
    for (std::size_t j = 0; j < out; ++j) {
      const double* wr = W + j * in;
      double acc = 0.0;
      for (std::size_t p = 0; p < in; ++p) acc += xr[p] * wr[p];
      y[i * out + j] = acc + (has_bias ? bias[j] : 0.0);
    }
  }
  auto make = [x, w, bias, n, in, out, has_bias](detail::Node* o) {
    return [x, w, bias, n, in, out, has_bias, o]() {
      const double* G = o->grad.data();
      if (x.requires_grad()) {
        auto& gx = x.impl()->grad_buffer();
        const double* W = w.data().data();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < out; ++j) {
            const double g = G[i * out + j];
            if (g == 0.0) continue;
            const double* wr = W + j * in;
            double* gr = gx.data() + i * in;
            for (std::size_t p = 0; p < in; ++p) gr[p] += g * wr[p];
          }
      }
      if (w.requires_grad()) {
        auto& gw = w.impl()->grad_buffer();
        const double* X = x.data().data();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < out; ++j) {
            const double g = G[i * out + j];
            if (g == 0.0) continue;
            const double* xr = X + i * in;
            double* gr = gw.data() + j * in;
            for (std::size_t p = 0; p < in; ++p) gr[p] += g * xr[p];
          }
      }
      if (has_bias && bias.requires_grad()) {
        auto& gb = bias.impl()->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < out; ++j) gb[j] += G[i * out + j];
      }
    };
  };
  if (has_bias) return detail::make_result(Shape{n, out}, std::move(y), {x, w, bias}, make);
  return detail::make_result(Shape{n, out}, std::move(y), {x, w}, make);
}

// ---------------------------------------------------------------------------
// Probabilistic ops

// Row-wise softmax over the last dimension of a [b x c] tensor.
inline Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax expects [b x c], got " + shape_str(logits.shape()));
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  std::vector<double> p(b * c);
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = logits.data().data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (p[i * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) p[i * c + j] /= z;
  }
  return detail::make_result(Shape{b, c}, std::move(p), {logits}, [logits, b, c](detail::Node* o) {
    return [logits, b, c, o]() {
      auto& g = logits.impl()->grad_buffer();
      for (std::size_t i = 0; i < b; ++i) {
        const double* y = o->value.data() + i * c;
        const double* gy = o->grad.data() + i * c;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += gy[j] * y[j];
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y[j] * (gy[j] - dot);
      }
    };
  });
}

// Softmax over a flat vector (any shape treated as one distribution).
inline Tensor softmax_vector(const Tensor& logits) {
  return reshape(softmax(reshape(logits, Shape{1, logits.numel()})), logits.shape());
}

/// Mean negative log-likelihood of integer labels under softmax(logits).
inline Tensor softmax_nll(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DimensionError("softmax_nll expects [b x c], got " + shape_str(logits.shape()));
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) {
    throw DimensionError("softmax_nll: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(b));
  }
  std::vector<double> probs(b * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw DataError("label " + std::to_string(labels[i]) + " out of range [0," + std::to_string(c) + ")");
    }
    const double* row = logits.data().data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (probs[i * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    loss += std::log(z) - (row[labels[i]] - mx);
  }
  loss /= static_cast<double>(b);
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::make_result(Shape{1}, {loss}, {logits},
                             [logits, probs = std::move(probs), lab = std::move(lab), b, c](detail::Node* o) {
                               return [logits, probs, lab, b, c, o]() {
                                 auto& g = logits.impl()->grad_buffer();
                                 const double s = o->grad[0] / static_cast<double>(b);
                                 for (std::size_t i = 0; i < b; ++i)
                                   for (std::size_t j = 0; j < c; ++j) {
                                     const double oh = static_cast<std::size_t>(lab[i]) == j ? 1.0 : 0.0;
                                     g[i * c + j] += s * (probs[i * c + j] - oh);
                                   }
                               };
                             });
}

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean of -log max(p[i, y_i], floor) over rows of a probability matrix.
inline Tensor nll_from_probs(const Tensor& probs, std::span<const int> labels,
                             double floor = kProbabilityFloor) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size()) {
    throw DimensionError("nll_from_probs: probabilities " + shape_str(probs.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t b = probs.dim(0), c = probs.dim(1);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw DataError("label " + std::to_string(labels[i]) + " out of range [0," + std::to_string(c) + ")");
    }
    loss -= std::log(std::max(probs[i * c + labels[i]], floor));
  }
  loss /= static_cast<double>(b);
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::make_result(Shape{1}, {loss}, {probs}, [probs, lab = std::move(lab), b, c, floor](detail::Node* o) {
    return [probs, lab, b, c, floor, o]() {
      auto& g = probs.impl()->grad_buffer();
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t k = i * c + static_cast<std::size_t>(lab[i]);
        const double p = probs[k];
        if (p > floor) g[k] -= o->grad[0] / (p * static_cast<double>(b));
      }
    };
  });
}

/// mu + sigma * eps; gradients reach mu (1) and sigma (eps).
inline Tensor gaussian_reparam(const Tensor& mu, const Tensor& sigma, const Tensor& eps) {
  detail::require_same_shape(mu, sigma, "gaussian_reparam");
  detail::require_same_shape(mu, eps, "gaussian_reparam");
  for (double s : sigma.data()) {
    if (s < 0.0 || std::isnan(s)) throw NumericError("gaussian_reparam: negative sigma");
  }
  std::vector<double> v(mu.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = mu[i] + sigma[i] * eps[i];
  return detail::make_result(mu.shape(), std::move(v), {mu, sigma, eps}, [mu, sigma, eps](detail::Node* o) {
    return [mu, sigma, eps, o]() {
      if (mu.requires_grad()) {
        auto& g = mu.impl()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
      }
      if (sigma.requires_grad()) {
        auto& g = sigma.impl()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * eps[i];
      }
      if (eps.requires_grad()) {
        auto& g = eps.impl()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * sigma[i];
      }
    };
  });
}

inline Tensor standard_normal(const Shape& shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor(shape, std::move(v));
}

/// Elementwise mean of equally shaped tensors.
inline Tensor average(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw UsageError("average of zero tensors");
  for (const auto& x : xs) detail::require_same_shape(xs[0], x, "average");
  const double inv = 1.0 / static_cast<double>(xs.size());
  std::vector<double> v(xs[0].numel(), 0.0);
  for (const auto& x : xs)
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += x[i];
  for (double& e : v) e *= inv;
  return detail::make_result_n(xs[0].shape(), std::move(v), xs, [xs, inv](detail::Node* o) {
    return [xs, inv, o]() {
      for (const auto& x : xs) {
        if (!x.requires_grad()) continue;
        auto& g = x.impl()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * inv;
      }
    };
  });
}

/// Elementwise unbiased sample variance across N >= 2 equally shaped tensors.
///
/// Deviations are taken relative to the first sample, so identical samples
/// give exactly zero.
inline Tensor sample_variance(const std::vector<Tensor>& xs) {
  if (xs.size() < 2) throw UsageError("sample_variance needs at least two samples");
  for (const auto& x : xs) detail::require_same_shape(xs[0], x, "sample_variance");
  const std::size_t n = xs.size(), m = xs[0].numel();
  const double dn = static_cast<double>(n);
  std::vector<double> v(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0, s2 = 0.0;
    for (const auto& x : xs) {
      const double d = x[i] - xs[0][i];
      s += d;
      s2 += d * d;
    }
    v[i] = (s2 - s * s / dn) / (dn - 1.0);
  }
  return detail::make_result_n(xs[0].shape(), std::move(v), xs, [xs, m, dn](detail::Node* o) {
    return [xs, m, dn, o]() {
      std::vector<double> mean(m, 0.0);
      for (const auto& x : xs)
        for (std::size_t i = 0; i < m; ++i) mean[i] += x[i];
      for (double& e : mean) e /= dn;
      for (const auto& x : xs) {
        if (!x.requires_grad()) continue;
        auto& g = x.impl()->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) g[i] += o->grad[i] * 2.0 * (x[i] - mean[i]) / (dn - 1.0);
      }
    };
  });
}

/// Sum over elements of KL(N(mu, softplus(rho)^2) || N(0, prior^2)).
inline Tensor kl_gaussian(const Tensor& mu, const Tensor& rho, double prior_sigma) {
  detail::require_same_shape(mu, rho, "kl_gaussian");
  const double p2 = prior_sigma * prior_sigma;
  double kl = 0.0;
  for (std::size_t i = 0; i < mu.numel(); ++i) {
    const double s = detail::softplus(rho[i]);
    kl += std::log(prior_sigma / s) + (s * s + mu[i] * mu[i]) / (2.0 * p2) - 0.5;
  }
  return detail::make_result(Shape{1}, {kl}, {mu, rho}, [mu, rho, p2](detail::Node* o) {
    return [mu, rho, p2, o]() {
      const double g0 = o->grad[0];
      if (mu.requires_grad()) {
        auto& g = mu.impl()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * mu[i] / p2;
      }
      if (rho.requires_grad()) {
        auto& g = rho.impl()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double s = detail::softplus(rho[i]);
          g[i] += g0 * (-1.0 / s + s / p2) * detail::sigmoid(rho[i]);
        }
      }
    };
  });
}

/// Straight-through selection gate: forward value is the hard one-hot entry
/// (1.0); backward routes the incoming gradient to probs[index].
inline Tensor straight_through_gate(const Tensor& probs, std::size_t index) {
  if (index >= probs.numel()) throw SelectionError("gate index out of range");
  return detail::make_result(Shape{1}, {1.0}, {probs}, [probs, index](detail::Node* o) {
    return [probs, index, o]() { probs.impl()->accumulate(index, o->grad[0]); };
  });
}

/// Per-example summed binary cross entropy with logits, averaged over batch.
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& target) {
  detail::require_same_shape(logits, target, "bce_with_logits");
  const std::size_t b = logits.dim(0);
  double loss = 0.0;
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    const double x = logits[i], t = target[i];
    loss += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::fabs(x)));
  }
  loss /= static_cast<double>(b);
  return detail::make_result(Shape{1}, {loss}, {logits, target}, [logits, target, b](detail::Node* o) {
    return [logits, target, b, o]() {
      if (!logits.requires_grad()) return;
      auto& g = logits.impl()->grad_buffer();
      const double s = o->grad[0] / static_cast<double>(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * (detail::sigmoid(logits[i]) - target[i]);
    };
  });
}

/// Per-example summed squared error, averaged over batch.
inline Tensor squared_error(const Tensor& pred, const Tensor& target) {
  detail::require_same_shape(pred, target, "squared_error");
  const std::size_t b = pred.dim(0);
  return scale(sum(square(sub(pred, target))), 1.0 / static_cast<double>(b));
}

/// Mean squared error over all elements.
inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  return mean(square(sub(pred, target)));
}

/// Mask multiply with inverted-dropout scaling 1/(1-p).
inline Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0,1)");
  if (p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = rng.uniform() >= p ? keep_scale : 0.0;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

// Non-differentiable helpers.
inline Tensor clip(const Tensor& x, double lo, double hi) {
  std::vector<double> v(x.values());
  for (double& e : v) e = std::clamp(e, lo, hi);
  return Tensor(x.shape(), std::move(v));
}

inline Tensor sigmoid_values(const Tensor& x) {
  std::vector<double> v(x.values());
  for (double& e : v) e = detail::sigmoid(e);
  return Tensor(x.shape(), std::move(v));
}

}  // namespace bayesnas
