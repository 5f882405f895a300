#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "bayesnas/autodiff/adam.hpp"
#include "bayesnas/autodiff/conv.hpp"
#include "bayesnas/autodiff/ops.hpp"
#include "bayesnas/error.hpp"
#include "bayesnas/io/dataset.hpp"
#include "bayesnas/nn/layers.hpp"
#include "bayesnas/rng.hpp"

namespace bayesnas {

enum class VaeVariant { dense, conv };

inline std::string_view to_string(VaeVariant v) { return v == VaeVariant::dense ? "dense" : "conv"; }

inline VaeVariant parse_vae_variant(std::string_view s) {
  if (s == "dense") return VaeVariant::dense;
  if (s == "conv") return VaeVariant::conv;
  throw ConfigError("unknown VAE variant '" + std::string(s) + "' (expected dense or conv)");
}

struct VaeOptions {
  VaeVariant variant = VaeVariant::dense;
  std::size_t base_channels = 32;  // n for the conv variant
  std::size_t hidden = 128;        // dense variant width
  std::size_t latent = 0;          // 0 picks the default for the variant
  int epochs = 100;
  double lr = 1e-4;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

inline std::size_t default_latent(const VaeOptions& o) {
  if (o.latent != 0) return o.latent;
  return o.variant == VaeVariant::dense ? 32 : 2 * o.base_channels;
}

struct VaeEncoding {
  Tensor mu;     // [b x latent]
  Tensor sigma;  // [b x latent], softplus of the second head
};

/// Variational autoencoder with either a 4+4 layer dense or a 4+4 layer
/// strided-conv body. Images use a Bernoulli decoder (BCE), tabular data a
/// Gaussian decoder (squared error).
class Vae {
 public:
  Vae() = default;

  Vae(Shape input_shape, FeatureKind kind, VaeOptions opts)
      : input_shape_(std::move(input_shape)), kind_(kind), opts_(opts), latent_(default_latent(opts)),
        store_(opts.seed ^ 0xAE5EEDULL) {
    if (opts_.variant == VaeVariant::conv) {
      if (input_shape_.size() != 3 || input_shape_[1] != input_shape_[2]) {
        throw ConfigError("conv VAE needs square [c x h x w] inputs, got " + shape_str(input_shape_));
      }
      build_conv();
    } else {
      build_dense();
    }
  }

  const Shape& input_shape() const { return input_shape_; }
  FeatureKind kind() const { return kind_; }
  const VaeOptions& options() const { return opts_; }
  std::size_t latent() const { return latent_; }
  bool trained() const { return trained_; }
  double data_lo() const { return data_lo_; }
  double data_hi() const { return data_hi_; }

  void mark_trained(double lo, double hi) {
    trained_ = true;
    data_lo_ = lo;
    data_hi_ = hi;
  }

  std::vector<NamedTensor> parameters() const { return store_.named(); }
  ParameterStore& store() { return store_; }

  VaeEncoding encode(const Tensor& x) const {
    Tensor h = x;
    if (opts_.variant == VaeVariant::conv) {
      for (const auto& l : enc_conv_) h = activation(conv_forward(l, h), ActivationKind::relu);
      h = flatten(h);
    } else {
      h = flatten(h);
      for (const auto& l : enc_dense_) h = activation(dense_forward(l, h), ActivationKind::relu);
    }
    return {dense_forward(mu_head_, h), softplus(dense_forward(rho_head_, h))};
  }

  /// Decoder output before the likelihood link: logits for images, values for
  /// tabular data. Shape [b x input_shape...].
  Tensor decode_raw(const Tensor& z) const {
    const std::size_t b = z.dim(0);
    Shape out{b};
    out.insert(out.end(), input_shape_.begin(), input_shape_.end());
    if (opts_.variant == VaeVariant::conv) {
      Tensor h = activation(dense_forward(dec_in_, z), ActivationKind::relu);
      h = reshape(h, Shape{b, enc_shapes_.back()[0], enc_shapes_.back()[1], enc_shapes_.back()[2]});
      for (std::size_t i = 0; i < dec_conv_.size(); ++i) {
        const auto& d = dec_conv_[i];
        h = conv_transpose2d(h, d.weight, d.bias, 2, 1, dec_output_padding_[i]);
        if (i + 1 < dec_conv_.size()) h = activation(h, ActivationKind::relu);
      }
      return h;
    }
    Tensor h = z;
    for (std::size_t i = 0; i < dec_dense_.size(); ++i) {
      h = dense_forward(dec_dense_[i], h);
      if (i + 1 < dec_dense_.size()) h = activation(h, ActivationKind::relu);
    }
    return reshape(h, out);
  }

  /// Decoded values on the data scale (sigmoid for images).
  Tensor decode(const Tensor& z) const {
    Tensor raw = decode_raw(z);
    return kind_ == FeatureKind::image ? sigmoid_values(raw) : raw;
  }

  Tensor reconstruction_loss(const Tensor& raw, const Tensor& x) const {
    return kind_ == FeatureKind::image ? bce_with_logits(raw, x) : squared_error(raw, x);
  }

  /// -0.5 * sum(1 + log sigma^2 - mu^2 - sigma^2), averaged over the batch.
  static Tensor latent_kl(const VaeEncoding& e) {
    const double b = static_cast<double>(e.mu.dim(0));
    Tensor s2 = square(e.sigma);
    Tensor inner = sub(add(square(e.mu), s2), log(s2));
    return scale(add_scalar(sum(inner), -static_cast<double>(e.mu.numel())), 0.5 / b);
  }

 private:
  void build_dense() {
    const std::size_t in = shape_numel(input_shape_), h = opts_.hidden;
    std::size_t prev = in;
    for (int i = 0; i < 3; ++i) {
      enc_dense_.push_back(dense("enc" + std::to_string(i), prev, h));
      prev = h;
    }
    mu_head_ = dense("enc3_mu", h, latent_);
    rho_head_ = dense("enc3_rho", h, latent_);
    prev = latent_;
    for (int i = 0; i < 3; ++i) {
      dec_dense_.push_back(dense("dec" + std::to_string(i), prev, h));
      prev = h;
    }
    dec_dense_.push_back(dense("dec3", h, in));
  }

  void build_conv() {
    const std::size_t n = opts_.base_channels;
    const std::size_t widths[] = {n, 2 * n, 4 * n, 4 * n};
    Shape s = input_shape_;
    enc_shapes_.push_back(s);
    for (int i = 0; i < 4; ++i) {
      const std::size_t c = s[0], o = widths[i];
      const std::string p = "vae/enc" + std::to_string(i);
      enc_conv_.push_back(ConvLayer{store_.weight(p + "/weight", Shape{o, c, 3, 3}, c * 9),
                                    store_.bias(p + "/bias", o, c * 9), 2, 1});
      s = Shape{o, detail::conv_out_size(s[1], 3, 2, 1), detail::conv_out_size(s[2], 3, 2, 1)};
      enc_shapes_.push_back(s);
    }
    const std::size_t flat = shape_numel(s);
    mu_head_ = dense("enc_mu", flat, latent_);
    rho_head_ = dense("enc_rho", flat, latent_);
    dec_in_ = dense("dec_in", latent_, flat);
    // mirror the encoder: 4n -> 4n -> 2n -> n -> C
    for (int i = 3; i >= 0; --i) {
      const Shape& from = enc_shapes_[static_cast<std::size_t>(i) + 1];
      const Shape& to = enc_shapes_[static_cast<std::size_t>(i)];
      const std::size_t ci = from[0], co = to[0];
      const std::string p = "vae/dec" + std::to_string(3 - i);
      dec_conv_.push_back(ConvLayer{store_.weight(p + "/weight", Shape{ci, co, 3, 3}, ci * 9),
                                    store_.bias(p + "/bias", co, ci * 9), 2, 1});
      const std::size_t base = 2 * from[1] - 1;  // (in-1)*2 - 2 + 3
      if (to[1] < base || to[1] - base > 1) throw DimensionError("conv VAE cannot mirror spatial size " + shape_str(to));
      dec_output_padding_.push_back(to[1] - base);
    }
  }

  DenseLayer dense(const std::string& name, std::size_t in, std::size_t out) {
    const std::string p = "vae/" + name;
    return DenseLayer{store_.weight(p + "/weight", Shape{out, in}, in), store_.bias(p + "/bias", out, in)};
  }

  Shape input_shape_;
  FeatureKind kind_ = FeatureKind::tabular;
  VaeOptions opts_;
  std::size_t latent_ = 0;
  ParameterStore store_;
  bool trained_ = false;
  double data_lo_ = 0.0, data_hi_ = 1.0;

  std::vector<DenseLayer> enc_dense_, dec_dense_;
  std::vector<ConvLayer> enc_conv_, dec_conv_;
  std::vector<Shape> enc_shapes_;
  std::vector<std::size_t> dec_output_padding_;
  DenseLayer mu_head_, rho_head_, dec_in_;
};

struct VaeLoss {
  double reconstruction = 0.0;
  double kl = 0.0;
  double total() const { return reconstruction + kl; }
};

/// One evaluation pass (no gradients) with the given stream for latent noise.
inline VaeLoss vae_evaluate(const Vae& vae, const Dataset& data, Rng& rng, std::size_t batch_size = 256) {
  NoGrad guard;
  VaeLoss acc;
  for (const auto& idx : make_batches(data.all_indices(), batch_size, nullptr)) {
    Tensor x = data.batch(idx);
    VaeEncoding e = vae.encode(x);
    Tensor z = gaussian_reparam(e.mu, e.sigma, standard_normal(e.mu.shape(), rng));
    const double w = static_cast<double>(idx.size());
    acc.reconstruction += vae.reconstruction_loss(vae.decode_raw(z), x).item() * w;
    acc.kl += Vae::latent_kl(e).item() * w;
  }
  acc.reconstruction /= static_cast<double>(data.size());
  acc.kl /= static_cast<double>(data.size());
  return acc;
}

struct VaeTrainResult {
  Vae model;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<VaeLoss> history;  // mean training loss per epoch
};

/// Minimizes reconstruction + latent KL with Adam. Pixel data must lie in
/// [0,1] for the BCE likelihood.
inline VaeTrainResult vae_train(const Dataset& data, VaeOptions opts) {
  if (data.empty()) throw DataError("VAE training needs a non-empty dataset");
  data.validate();
  if (opts.epochs < 0) throw ConfigError("VAE epochs must be non-negative");
  if (!(opts.lr > 0.0)) throw ConfigError("VAE learning rate must be positive");
  const auto [lo, hi] = data.value_range();
  if (data.kind == FeatureKind::image && (lo < 0.0 || hi > 1.0)) {
    throw DataError("image VAE needs pixels scaled to [0,1], found range [" + std::to_string(lo) + ", " +
                    std::to_string(hi) + "]");
  }
  VaeTrainResult res{Vae(data.input_shape, data.kind, opts), 0.0, 0.0, {}};
  Vae& vae = res.model;
  Rng rng(opts.seed, 0x0AE);
  {
    Rng eval_rng = rng.fork(1);
    res.initial_loss = vae_evaluate(vae, data, eval_rng).total();
  }
  Adam adam(opts.lr);
  const auto params = vae.parameters();
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    VaeLoss epoch_loss;
    for (const auto& idx : make_batches(data.all_indices(), opts.batch_size, &rng)) {
      Adam::zero_grad(params);
      Tensor x = data.batch(idx);
      GradTape tape;
      VaeEncoding e = vae.encode(x);
      Tensor z = gaussian_reparam(e.mu, e.sigma, standard_normal(e.mu.shape(), rng));
      Tensor rec = vae.reconstruction_loss(vae.decode_raw(z), x);
      Tensor kl = Vae::latent_kl(e);
      Tensor loss = add(rec, kl);
      if (!std::isfinite(loss.item())) {
        throw NumericError("VAE training diverged: non-finite loss at epoch " + std::to_string(epoch));
      }
      tape.backward(loss);
      adam.step(params);
      const double w = static_cast<double>(idx.size());
      epoch_loss.reconstruction += rec.item() * w;
      epoch_loss.kl += kl.item() * w;
    }
    epoch_loss.reconstruction /= static_cast<double>(data.size());
    epoch_loss.kl /= static_cast<double>(data.size());
    res.history.push_back(epoch_loss);
  }
  vae.mark_trained(lo, hi);
  Rng eval_rng = rng.fork(2);
  res.final_loss = vae_evaluate(vae, data, eval_rng).total();
  return res;
}

/// z = mu + (beta + sigma) * eps: beta widens the latent standard deviation.
inline Tensor sample_shifted(const Vae& vae, const Tensor& x, double beta, Rng& rng) {
  if (!(beta >= 0.0)) throw ConfigError("beta must be non-negative");
  NoGrad guard;
  VaeEncoding e = vae.encode(x);
  return gaussian_reparam(e.mu, add_scalar(e.sigma, beta), standard_normal(e.mu.shape(), rng));
}

/// Decoded beta-shifted samples, clipped to the training data range.
inline Tensor generate_ood(const Vae& vae, const Tensor& batch, double beta, Rng& rng) {
  if (!vae.trained()) throw UsageError("generate_ood called with an untrained VAE");
  NoGrad guard;
  Tensor z = sample_shifted(vae, batch, beta, rng);
  return clip(vae.decode(z), vae.data_lo(), vae.data_hi());
}

}  // namespace bayesnas
