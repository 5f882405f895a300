#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "bayesnas/io/dataset.hpp"
#include "bayesnas/oodgen/transforms.hpp"
#include "bayesnas/oodgen/vae.hpp"
#include "gradcheck.hpp"

using namespace bayesnas;
using bayesnas::testing::grad_check;
using bayesnas::testing::random_tensor;

namespace {

// Smooth blobs at random centres, values in [0,1].
Dataset blob_images(std::size_t n, std::size_t side, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.kind = FeatureKind::image;
  d.input_shape = {1, side, side};
  d.num_classes = 2;
  d.tag = "blobs";
  for (std::size_t i = 0; i < n; ++i) {
    const double cx = rng.uniform(2.0, side - 3.0), cy = rng.uniform(2.0, side - 3.0);
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        d.features.push_back(std::exp(-r2 / 4.0));
      }
    d.labels.push_back(static_cast<int>(i % 2));
  }
  return d;
}

Tensor centred_blob(std::size_t side) {
  std::vector<double> v;
  const double c = (side - 1) / 2.0;
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const double dx = x - c, dy = (y - c) * 0.6;
      v.push_back(std::exp(-(dx * dx + dy * dy) / 18.0));
    }
  return Tensor(Shape{1, 1, side, side}, v);
}

double mean_abs(const Tensor& t) {
  double s = 0;
  for (double v : t.data()) s += std::fabs(v);
  return s / t.numel();
}

}  // namespace

TEST(Vae, DenseShapes) {
  VaeOptions o;
  o.hidden = 16;
  Vae vae({1, 8, 8}, FeatureKind::image, o);
  EXPECT_EQ(vae.latent(), 32u);
  Rng rng(1);
  Tensor x = random_tensor({3, 1, 8, 8}, rng, 0.0, 1.0);
  auto e = vae.encode(x);
  EXPECT_EQ(e.mu.shape(), (Shape{3, 32}));
  EXPECT_EQ(e.sigma.shape(), (Shape{3, 32}));
  for (double s : e.sigma.data()) EXPECT_GT(s, 0.0);
  EXPECT_EQ(vae.decode(e.mu).shape(), (Shape{3, 1, 8, 8}));
}

TEST(Vae, ConvShapesMatchInput) {
  for (Shape in : {Shape{1, 28, 28}, Shape{3, 32, 32}, Shape{1, 13, 13}}) {
    VaeOptions o;
    o.variant = VaeVariant::conv;
    o.base_channels = 2;
    Vae vae(in, FeatureKind::image, o);
    EXPECT_EQ(vae.latent(), 4u);
    Shape b{2};
    b.insert(b.end(), in.begin(), in.end());
    Rng rng(2);
    Tensor x = random_tensor(b, rng, 0.0, 1.0);
    EXPECT_EQ(vae.decode(vae.encode(x).mu).shape(), b) << shape_str(in);
  }
}

TEST(Vae, ConvRejectsFlatInput) {
  VaeOptions o;
  o.variant = VaeVariant::conv;
  EXPECT_THROW(Vae({13}, FeatureKind::tabular, o), ConfigError);
  EXPECT_THROW(Vae({1, 13, 9}, FeatureKind::image, o), ConfigError);
  EXPECT_THROW(parse_vae_variant("gan"), ConfigError);
}

TEST(Vae, LatentKlMatchesHandFormulaAndIsNonNegative) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    Tensor mu = random_tensor({4, 5}, rng, -2.0, 2.0);
    Tensor sigma = random_tensor({4, 5}, rng, 0.1, 3.0);
    double ref = 0.0;
    for (std::size_t i = 0; i < mu.numel(); ++i) {
      const double m = mu[i], s = sigma[i];
      ref += 0.5 * (m * m + s * s - std::log(s * s) - 1.0);
    }
    ref /= 4.0;
    const double kl = Vae::latent_kl({mu, sigma}).item();
    EXPECT_NEAR(kl, ref, 1e-10);
    EXPECT_GE(kl, 0.0);
  }
  Tensor zero = Tensor::zeros({2, 3});
  EXPECT_NEAR(Vae::latent_kl({zero, Tensor::full({2, 3}, 1.0)}).item(), 0.0, 1e-15);
}

TEST(Vae, LatentKlGradient) {
  Rng rng(4);
  Tensor mu = random_tensor({3, 4}, rng, -1.0, 1.0).set_requires_grad(true);
  Tensor sigma = random_tensor({3, 4}, rng, 0.3, 2.0).set_requires_grad(true);
  auto r = grad_check({mu, sigma}, [&] { return Vae::latent_kl({mu, sigma}); });
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Vae, ReconstructionGradientDenseAndConv) {
  for (auto variant : {VaeVariant::dense, VaeVariant::conv}) {
    VaeOptions o;
    o.variant = variant;
    o.hidden = 6;
    o.base_channels = 1;
    o.latent = 3;
    Vae vae({1, 6, 6}, FeatureKind::image, o);
    Rng rng(5);
    Tensor x = random_tensor({2, 1, 6, 6}, rng, 0.0, 1.0);
    Tensor eps = random_tensor({2, 3}, rng);
    std::vector<Tensor> params;
    for (const auto& p : vae.parameters()) params.push_back(p.tensor);
    auto r = bayesnas::testing::grad_check_normwise(params, [&] {
      auto e = vae.encode(x);
      Tensor z = gaussian_reparam(e.mu, e.sigma, eps);
      return add(vae.reconstruction_loss(vae.decode_raw(z), x), Vae::latent_kl(e));
    });
    EXPECT_LT(r, 1e-4) << to_string(variant);
  }
}

TEST(Vae, TrainingReducesLossAndKlStaysNonNegative) {
  Dataset d = blob_images(64, 8, 6);
  VaeOptions o;
  o.hidden = 32;
  o.latent = 4;
  o.epochs = 15;
  o.lr = 3e-3;
  o.batch_size = 16;
  o.seed = 7;
  auto res = vae_train(d, o);
  EXPECT_TRUE(res.model.trained());
  EXPECT_LT(res.final_loss, res.initial_loss);
  ASSERT_EQ(res.history.size(), 15u);
  for (const auto& h : res.history) EXPECT_GE(h.kl, 0.0);
}

TEST(Vae, TrainingValidatesInput) {
  Dataset d = blob_images(4, 8, 1);
  d.features[0] = 2.0;
  EXPECT_THROW(vae_train(d, VaeOptions{}), DataError);
  Dataset empty;
  empty.input_shape = {1, 8, 8};
  EXPECT_THROW(vae_train(empty, VaeOptions{}), DataError);
}

TEST(Vae, TabularUsesSquaredError) {
  Dataset d;
  d.kind = FeatureKind::tabular;
  d.input_shape = {3};
  d.num_classes = 2;
  Rng rng(8);
  for (int i = 0; i < 40; ++i) {
    for (int k = 0; k < 3; ++k) d.features.push_back(rng.normal() * 2.0 - 1.0);
    d.labels.push_back(i % 2);
  }
  VaeOptions o;
  o.hidden = 16;
  o.latent = 2;
  o.epochs = 20;
  o.lr = 3e-3;
  o.batch_size = 8;
  auto res = vae_train(d, o);
  EXPECT_LT(res.final_loss, res.initial_loss);
}

TEST(OodGen, ZeroBetaSamplesMatchEncoderMoments) {
  VaeOptions o;
  o.hidden = 8;
  o.latent = 3;
  Vae vae({4}, FeatureKind::tabular, o);
  Rng rng(9);
  Tensor x1 = random_tensor({1, 4}, rng);
  const std::size_t n = 40000;
  std::vector<double> rep;
  for (std::size_t i = 0; i < n; ++i) rep.insert(rep.end(), x1.data().begin(), x1.data().end());
  Tensor x(Shape{n, 4}, rep);
  auto e = vae.encode(x1);
  for (double beta : {0.0, 1.0}) {
    Rng s(10);
    Tensor z = sample_shifted(vae, x, beta, s);
    for (std::size_t k = 0; k < 3; ++k) {
      double m = 0, m2 = 0;
      for (std::size_t i = 0; i < n; ++i) {
        m += z[i * 3 + k];
        m2 += z[i * 3 + k] * z[i * 3 + k];
      }
      m /= n;
      const double sd = std::sqrt(m2 / n - m * m);
      const double want_sd = e.sigma[k] + beta;
      EXPECT_NEAR(m, e.mu[k], 4.0 * want_sd / std::sqrt(double(n)));
      EXPECT_NEAR(sd / want_sd, 1.0, 0.02);
    }
  }
  Rng s(1);
  EXPECT_THROW(sample_shifted(vae, x1, -0.1, s), ConfigError);
}

TEST(OodGen, DeterministicAndClipped) {
  Dataset d = blob_images(32, 8, 11);
  VaeOptions o;
  o.hidden = 16;
  o.latent = 4;
  o.epochs = 2;
  o.lr = 1e-3;
  o.batch_size = 16;
  auto res = vae_train(d, o);
  Tensor batch = d.batch(std::vector<std::size_t>{0, 1, 2, 3});
  Rng a(12), b(12);
  Tensor g1 = generate_ood(res.model, batch, 1.0, a);
  Tensor g2 = generate_ood(res.model, batch, 1.0, b);
  EXPECT_EQ(g1.values(), g2.values());
  EXPECT_EQ(g1.shape(), batch.shape());
  const auto [lo, hi] = d.value_range();
  for (double v : g1.data()) {
    EXPECT_GE(v, lo);
    EXPECT_LE(v, hi);
  }
  Vae untrained({1, 8, 8}, FeatureKind::image, o);
  Rng c(1);
  EXPECT_THROW(generate_ood(untrained, batch, 1.0, c), UsageError);
}

TEST(Transforms, RotateZeroIsIdentity) {
  Rng rng(13);
  Tensor x = random_tensor({2, 3, 7, 5}, rng, 0.0, 1.0);
  EXPECT_EQ(rotate_images(x, 0.0).values(), x.values());
}

TEST(Transforms, RotateRoundTrip) {
  Tensor x = centred_blob(28);
  Tensor back = rotate_images(rotate_images(x, 30.0), -30.0);
  double err = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) err += std::fabs(back[i] - x[i]);
  err /= x.numel();
  EXPECT_LT(err / mean_abs(x), 0.05);
  // a quarter turn of a non-symmetric image changes it
  EXPECT_NE(rotate_images(x, 90.0).values(), x.values());
}

TEST(Transforms, RotateQuarterTurnMovesPixels) {
  std::vector<double> v(9, 0.0);
  v[1] = 1.0;  // top middle
  Tensor x(Shape{1, 1, 3, 3}, v);
  Tensor r = rotate_images(x, 90.0);
  double total = 0.0;
  for (double p : r.data()) total += p;
  EXPECT_NEAR(total, 1.0, 1e-9);
  EXPECT_NEAR(r[1], 0.0, 1e-9);
}

TEST(Transforms, WhiteNoiseAndCorruption) {
  Rng rng(14);
  Tensor w = white_noise({500, 20}, rng);
  EXPECT_EQ(w.shape(), (Shape{500, 20}));
  double m = 0, m2 = 0;
  for (double v : w.data()) {
    m += v;
    m2 += v * v;
  }
  m /= w.numel();
  EXPECT_NEAR(m, 0.0, 0.02);
  EXPECT_NEAR(m2 / w.numel(), 1.0, 0.03);

  Tensor x = random_tensor({10, 1, 4, 4}, rng, 0.0, 1.0);
  EXPECT_EQ(gaussian_corrupt(x, 0.0, rng).values(), x.values());
  Tensor c = gaussian_corrupt(x, 5.0, rng);
  for (double v : c.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_NE(c.values(), x.values());
  EXPECT_THROW(gaussian_corrupt(x, -1.0, rng), ConfigError);
}

TEST(Transforms, ParseSpec) {
  auto r = parse_baseline_ood("rotate:45");
  EXPECT_EQ(r.kind, BaselineOodKind::rotate);
  EXPECT_DOUBLE_EQ(r.param, 45.0);
  EXPECT_DOUBLE_EQ(parse_baseline_ood("rotate").param, 30.0);
  EXPECT_EQ(parse_baseline_ood("white_noise").kind, BaselineOodKind::white_noise);
  EXPECT_DOUBLE_EQ(parse_baseline_ood("gaussian_corrupt:3").param, 3.0);
  EXPECT_THROW(parse_baseline_ood("fog"), ConfigError);
  EXPECT_THROW(parse_baseline_ood("rotate:abc"), ConfigError);
}
