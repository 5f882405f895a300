#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <memory>
#include <vector>

#include "bayesnas/io/synth.hpp"
#include "bayesnas/search/search.hpp"
#include "bayesnas/searchspace/backbone.hpp"
#include "gradcheck.hpp"

using namespace bayesnas;
using bayesnas::testing::random_tensor;

namespace {

Network dense_net(Rng& rng, bool bayes_last, double rho = -2.0) {
  Network net;
  net.add(std::make_unique<LayerModule>("d0", DenseLayer{random_tensor({5, 3}, rng), random_tensor({5}, rng)},
                                        ActivationKind::elu, "d0"));
  if (bayes_last) {
    net.add(std::make_unique<LayerModule>(
        "d1",
        BayesDenseLayer{random_tensor({3, 5}, rng), Tensor::parameter({3, 5}, std::vector<double>(15, rho)),
                        random_tensor({3}, rng), Tensor::parameter({3}, std::vector<double>(3, rho)), 1.0},
        ActivationKind::identity, "d1"));
  } else {
    net.add(std::make_unique<LayerModule>("d1", DenseLayer{random_tensor({3, 5}, rng), random_tensor({3}, rng)},
                                          ActivationKind::identity, "d1"));
  }
  return net;
}

std::vector<double> softmax_row(const double* z, std::size_t c) {
  double m = z[0];
  for (std::size_t j = 1; j < c; ++j) m = std::max(m, z[j]);
  std::vector<double> p(c);
  double s = 0;
  for (std::size_t j = 0; j < c; ++j) s += (p[j] = std::exp(z[j] - m));
  for (auto& v : p) v /= s;
  return p;
}

struct HandTerms {
  double nll = 0, var = 0;
};

// Plain-double reimplementation: softmax of each sample, MC mean, NLL of the
// mean, and the unbiased across-sample variance averaged over all entries.
HandTerms hand_terms(const std::vector<Tensor>& logits, const std::vector<int>& labels) {
  const std::size_t n = logits.size(), b = logits[0].dim(0), c = logits[0].dim(1);
  std::vector<std::vector<double>> p(n);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < b; ++i) {
      auto row = softmax_row(logits[s].data().data() + i * c, c);
      p[s].insert(p[s].end(), row.begin(), row.end());
    }
  HandTerms t;
  for (std::size_t i = 0; i < b; ++i) {
    double mean_true = 0;
    for (std::size_t s = 0; s < n; ++s) mean_true += p[s][i * c + labels[i]] / n;
    t.nll -= std::log(mean_true) / b;
  }
  if (n > 1) {
    for (std::size_t k = 0; k < b * c; ++k) {
      double m = 0;
      for (std::size_t s = 0; s < n; ++s) m += p[s][k] / n;
      double v = 0;
      for (std::size_t s = 0; s < n; ++s) v += (p[s][k] - m) * (p[s][k] - m);
      t.var += v / (n - 1) / (b * c);
    }
  }
  return t;
}

struct Fixture {
  BackboneSpec backbone = mlp_backbone();
  CandidateSpace space = default_candidates(backbone);
  SplitData data;
  Vae vae;
  SearchConfig cfg;

  explicit Fixture(std::size_t n = 160) {
    Dataset d = synth_dataset(SynthKind::gaussians, n, 1);
    data = split_dataset(d, 0.8, 1);
    VaeOptions vo;
    vo.hidden = 8;
    vo.latent = 2;
    vo.epochs = 1;
    vo.lr = 1e-3;
    vae = vae_train(data.val, vo).model;
    cfg.epochs = 3;
    cfg.noise.warmup_epochs = 1;
    cfg.batch_size = 32;
    cfg.controller = {8, 16, 2};
    cfg.lr_t = 1e-3;
    cfg.lr_arch = 1e-2;
    cfg.seed = 11;
  }
};

std::map<std::string, std::vector<double>> snapshot(const std::vector<NamedTensor>& ps) {
  std::map<std::string, std::vector<double>> m;
  for (const auto& p : ps) m[p.name] = p.tensor.values();
  return m;
}

}  // namespace

TEST(PredictiveVariance, ZeroForDeterministicAndZeroSigma) {
  Rng rng(1);
  Tensor x = random_tensor({4, 3}, rng, -1, 1, false);
  Network det = dense_net(rng, false);
  Rng s(2);
  EXPECT_EQ(predictive_variance(det, x, 5, s).item(), 0.0);
  Network flat = dense_net(rng, true, -1000.0);
  EXPECT_EQ(predictive_variance(flat, x, 5, s).item(), 0.0);
  Network bayes = dense_net(rng, true);
  EXPECT_GT(predictive_variance(bayes, x, 5, s).item(), 0.0);
  EXPECT_THROW(predictive_variance(bayes, x, 1, s), UsageError);
}

TEST(PredictiveVariance, MatchesHandRolledTwoSampleCase) {
  Rng rng(3);
  Tensor x = random_tensor({3, 3}, rng, -1, 1, false);
  Network net = dense_net(rng, true, -0.5);
  Rng a(7), b(7);
  const double v = predictive_variance(net, x, 2, a).item();
  const auto logits = mc_samples(net, x, 2, b, ForwardMode::train);
  EXPECT_NEAR(v, hand_terms(logits, {0, 1, 2}).var, 1e-14);
}

TEST(TrainLoss, PlainNllAndComponentSum) {
  Rng rng(4);
  Tensor x = random_tensor({6, 3}, rng, -1, 1, false);
  const std::vector<int> y = {0, 1, 2, 2, 1, 0};
  Network det = dense_net(rng, false);
  Rng s(1);
  auto t = train_loss(det, x, y, 0.0, s);
  const auto logits = det.forward(x, {});
  EXPECT_NEAR(t.total.item(), hand_terms({logits}, y).nll, 1e-12);
  EXPECT_EQ(t.kl, 0.0);

  Network bayes = dense_net(rng, true);
  Rng s1(5), s2(5);
  auto tb = train_loss(bayes, x, y, 0.3, s1);
  ForwardContext ctx{ForwardMode::train, &s2};
  const double nll = hand_terms({bayes.forward(x, ctx)}, y).nll;
  EXPECT_NEAR(tb.total.item(), nll + 0.3 * bayes.kl().item(), 1e-12);
  EXPECT_GT(tb.kl, 0.0);
}

TEST(TrainLoss, PriorMatchedPosteriorAddsNoKl) {
  const double rho = std::log(std::expm1(1.0));  // softplus(rho) = 1 = prior
  Network net;
  net.add(std::make_unique<LayerModule>(
      "b", BayesDenseLayer{Tensor::zeros({2, 3}), Tensor::full({2, 3}, rho), Tensor::zeros({2}), Tensor::full({2}, rho), 1.0},
      ActivationKind::identity, "b"));
  EXPECT_NEAR(net.kl().item(), 0.0, 1e-12);
}

TEST(ValLoss, ComponentSumOracle) {
  Rng rng(6);
  Tensor x = random_tensor({5, 3}, rng, -1, 1, false);
  Tensor ood = random_tensor({5, 3}, rng, -3, 3, false);
  const std::vector<int> y = {0, 1, 2, 1, 0};
  Network net = dense_net(rng, true, -0.7);
  const Rng base(9, 4);
  auto v = val_loss(net, x, y, ood, 0.2, 0.3, 4, base);
  Rng id_rng = base.fork(1), ood_rng = base.fork(2);
  const auto id = hand_terms(mc_samples(net, x, 4, id_rng, ForwardMode::train), y);
  const auto od = hand_terms(mc_samples(net, ood, 4, ood_rng, ForwardMode::train), y);
  EXPECT_NEAR(v.nll, id.nll, 1e-12);
  EXPECT_NEAR(v.var_id, id.var, 1e-14);
  EXPECT_NEAR(v.var_ood, od.var, 1e-14);
  EXPECT_NEAR(v.total.item(), id.nll + 0.2 * id.var - 0.3 * od.var, 1e-12);
}

TEST(ValLoss, ReducesToNll) {
  Rng rng(7);
  Tensor x = random_tensor({5, 3}, rng, -1, 1, false);
  Tensor ood = random_tensor({5, 3}, rng, -3, 3, false);
  const std::vector<int> y = {0, 1, 2, 1, 0};
  Network bayes = dense_net(rng, true);
  const Rng base(3);
  auto v = val_loss(bayes, x, y, ood, 0.0, 0.0, 5, base);
  EXPECT_EQ(v.total.item(), v.nll);
  Network det = dense_net(rng, false);
  auto d = val_loss(det, x, y, ood, 5.0, 7.0, 5, base);
  EXPECT_NEAR(d.total.item(), hand_terms({det.forward(x, {})}, y).nll, 1e-12);
  EXPECT_EQ(d.var_id, 0.0);
  EXPECT_EQ(d.var_ood, 0.0);
}

TEST(ValLoss, DecreasesWithOodVariance) {
  Rng rng(8);
  Tensor x = random_tensor({5, 3}, rng, -1, 1, false);
  Tensor ood = random_tensor({5, 3}, rng, -3, 3, false);
  const std::vector<int> y = {0, 1, 2, 1, 0};
  Network net = dense_net(rng, true, -0.5);
  const Rng base(2);
  const double gamma = 0.4, h = 1e-5;
  const auto v = val_loss(net, x, y, ood, 0.1, gamma, 5, base);
  ASSERT_GT(v.var_ood, 0.0);
  // L as a function of the OOD variance term: dL/dVar_ood = -gamma
  const double lp = val_loss(net, x, y, ood, 0.1, gamma + h / v.var_ood, 5, base).total.item();
  const double lm = val_loss(net, x, y, ood, 0.1, gamma - h / v.var_ood, 5, base).total.item();
  const double dl_dvar = (lp - lm) / (2.0 * h) * gamma;
  EXPECT_NEAR(dl_dvar, -gamma, 1e-6);
  EXPECT_LT(dl_dvar, 0.0);
}

TEST(ValLoss, GradientMatchesFiniteDifferences) {
  Rng rng(9);
  Tensor x = random_tensor({4, 3}, rng, -1, 1, false);
  Tensor ood = random_tensor({4, 3}, rng, -3, 3, false);
  const std::vector<int> y = {0, 1, 2, 1};
  Network net = dense_net(rng, true, -1.0);
  std::vector<Tensor> params;
  for (const auto& p : net.parameters()) params.push_back(p.tensor);
  const Rng base(5);
  auto r = bayesnas::testing::grad_check(params, [&] { return val_loss(net, x, y, ood, 0.5, 0.5, 3, base).total; });
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(SearchConfig, Validation) {
  SearchConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.kappa(400), 1.0 / 400);
  c.kl_weight = 0.5;
  EXPECT_EQ(c.kappa(400), 0.5);
  auto bad = [](auto f) {
    SearchConfig s;
    f(s);
    EXPECT_THROW(s.validate(), ConfigError);
  };
  bad([](SearchConfig& s) { s.alpha = -1; });
  bad([](SearchConfig& s) { s.gamma = -0.1; });
  bad([](SearchConfig& s) { s.lr_t = 0; });
  bad([](SearchConfig& s) { s.lr_arch = -1; });
  bad([](SearchConfig& s) { s.epochs = 0; });
  bad([](SearchConfig& s) { s.train_fraction = 1.0; });
  SearchConfig s;
  s.epochs = 5;
  EXPECT_EQ(s.schedule().total_epochs, 5);
  EXPECT_EQ(s.schedule().warmup_epochs, 5);
}

TEST(SearchSplit, Disjoint) {
  Dataset d = synth_dataset(SynthKind::gaussians, 100, 2);
  SplitData s = split_dataset(d, 0.8, 3);
  EXPECT_EQ(s.train.size(), 80u);
  EXPECT_EQ(s.val.size(), 20u);
  EXPECT_EQ(s.num_classes, 2u);
  std::multiset<std::vector<double>> rows;
  auto add = [&](const Dataset& p) {
    for (std::size_t i = 0; i < p.size(); ++i) rows.insert({p.features.begin() + i * 2, p.features.begin() + i * 2 + 2});
  };
  add(s.train);
  add(s.val);
  std::multiset<std::vector<double>> all;
  for (std::size_t i = 0; i < d.size(); ++i) all.insert({d.features.begin() + i * 2, d.features.begin() + i * 2 + 2});
  EXPECT_EQ(rows, all);
}

TEST(SearchStep, IdenticalSeedsAreBitIdentical) {
  Fixture f;
  SearchState a(f.backbone, f.space, f.cfg), b(f.backbone, f.space, f.cfg);
  const std::vector<std::vector<std::size_t>> tb = {{0, 1, 2, 3, 4, 5, 6, 7}};
  const std::vector<std::size_t> vb = {0, 1, 2, 3, 4, 5};
  for (int i = 0; i < 2; ++i) {
    auto ra = search_step(a, 1, f.data, tb, vb, f.vae);
    auto rb = search_step(b, 1, f.data, tb, vb, f.vae);
    EXPECT_EQ(to_json(ra).dump(), to_json(rb).dump());
  }
  EXPECT_EQ(snapshot(a.controller.arch_parameters()), snapshot(b.controller.arch_parameters()));
  EXPECT_EQ(snapshot(a.store.named()), snapshot(b.store.named()));
}

TEST(SearchStep, ZeroArchLearningRateFreezesController) {
  Fixture f;
  f.cfg.lr_arch = 0.0;
  SearchState st(f.backbone, f.space, f.cfg);
  const auto before = snapshot(st.controller.arch_parameters());
  const auto rec = search_step(st, 2, f.data, {{0, 1, 2, 3}}, {0, 1, 2, 3}, f.vae);
  EXPECT_EQ(snapshot(st.controller.arch_parameters()), before);
  EXPECT_GT(st.store.size(), 0u);
  EXPECT_TRUE(std::isfinite(rec.val_loss));
}

TEST(SearchStep, ArchStepMovesController) {
  Fixture f;
  SearchState st(f.backbone, f.space, f.cfg);
  const auto before = snapshot(st.controller.arch_parameters());
  search_step(st, 2, f.data, {{0, 1, 2, 3}}, {0, 1, 2, 3}, f.vae);
  EXPECT_NE(snapshot(st.controller.arch_parameters()), before);
}

TEST(SearchStep, CandidateParametersPersistAcrossDeselection) {
  Fixture f;
  SearchState st(f.backbone, f.space, f.cfg);
  AssembleOptions opts;
  opts.store = &st.store;
  opts.input_shape = f.data.input_shape;
  opts.num_classes = 2;
  // warmup epochs pick uniformly random selections, so the steps below visit
  // different candidates
  std::map<std::string, std::vector<double>> prev;
  for (int i = 0; i < 6; ++i) {
    const auto rec = search_step(st, 1, f.data, {{0, 1, 2, 3}}, {0, 1, 2, 3}, f.vae);
    auto net = assemble(f.backbone, f.space, rec.selection, opts);
    std::set<std::string> used;
    for (const auto& p : net.network.parameters()) used.insert(p.name);
    auto now = snapshot(st.store.named());
    for (const auto& [name, values] : prev)
      if (!used.count(name)) {
        EXPECT_EQ(now.at(name), values) << name;
      }
    prev = std::move(now);
  }
  // the same candidate maps to the same storage
  const auto sel = fixed_selection(f.space, 1.0, ActivationKind::relu, 3, 1);
  auto n1 = assemble(f.backbone, f.space, sel, opts);
  auto n2 = assemble(f.backbone, f.space, sel, opts);
  const auto p1 = n1.network.parameters(), p2 = n2.network.parameters();
  ASSERT_EQ(p1.size(), p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i) EXPECT_TRUE(p1[i].tensor.same_storage(p2[i].tensor));
}

TEST(SearchStep, NonFiniteLossAbortsWithSelectionDump) {
  Fixture f;
  f.data.train.features[0] = std::numeric_limits<double>::quiet_NaN();
  SearchState st(f.backbone, f.space, f.cfg);
  try {
    search_step(st, 1, f.data, {{0, 1}}, {0, 1}, f.vae);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("selection"), std::string::npos);
    EXPECT_EQ(e.exit_code(), 4);
  }
}

TEST(RunSearch, DeterministicTrajectoryAndReplay) {
  Fixture f;
  SearchState a(f.backbone, f.space, f.cfg), b(f.backbone, f.space, f.cfg);
  std::vector<std::string> streamed;
  auto ra = run_search(a, f.data, f.vae, [&](const std::string& l) { streamed.push_back(l); });
  auto rb = run_search(b, f.data, f.vae);
  EXPECT_EQ(ra.trajectory, rb.trajectory);
  EXPECT_EQ(ra.selection, rb.selection);
  EXPECT_EQ(streamed, ra.trajectory);
  EXPECT_EQ(a.epoch, 3);

  // 128 training examples in batches of 32: 4 steps per epoch plus an epoch line
  EXPECT_EQ(ra.trajectory.size(), 3u * 5u);
  const auto replayed = replay_selections(ra.trajectory);
  ASSERT_EQ(replayed.size(), 12u);
  std::size_t k = 0;
  for (const auto& line : ra.trajectory) {
    const auto j = nlohmann::json::parse(line);
    if (j["type"] != "step") continue;
    const auto& sel = replayed[k++];
    EXPECT_EQ(bayes_suffix_start(f.space, sel), j["bayes_suffix_start"].get<std::size_t>());
    EXPECT_NO_THROW(assemble(f.backbone, f.space, sel));
  }
  // the final selection is the noiseless argmax of the controller
  NoGrad g;
  EXPECT_EQ(ra.selection, select(probabilities_to_scores(a.controller.forward())));
  const auto last = nlohmann::json::parse(ra.trajectory.back());
  EXPECT_EQ(last["type"], "epoch");
  EXPECT_EQ(selection_from_indices(last["argmax_selection"]), ra.selection);
}

TEST(RunSearch, DifferentSeedsDiverge) {
  Fixture f;
  SearchState a(f.backbone, f.space, f.cfg);
  f.cfg.seed = 12;
  SearchState b(f.backbone, f.space, f.cfg);
  EXPECT_NE(run_search(a, f.data, f.vae).trajectory, run_search(b, f.data, f.vae).trajectory);
}

TEST(RunSearch, MagnitudeGuardWarns) {
  Fixture f;
  f.cfg.epochs = 1;
  f.cfg.kl_weight = 1e6;
  SearchState st(f.backbone, f.space, f.cfg);
  auto r = run_search(st, f.data, f.vae);
  bool kl_warning = false;
  for (const auto& w : r.warnings) kl_warning = kl_warning || w.find("kappa_kl") != std::string::npos;
  // only warns when the sampled selection has a Bayesian layer; the ratio is logged either way
  const auto ep = nlohmann::json::parse(r.trajectory.back());
  const double ratio = ep["term_to_nll"]["kappa_kl"].get<double>();
  EXPECT_EQ(kl_warning, ratio > 100.0);
}

TEST(Retrain, FreshParametersAndDecreasingLoss) {
  Fixture f(400);
  const auto sel = fixed_selection(f.space, 1.0, ActivationKind::relu, 3, 2);
  SearchConfig cfg = f.cfg;
  cfg.retrain_epochs = 8;
  cfg.retrain_lr = 5e-3;
  auto m1 = retrain(f.backbone, f.space, sel, f.data.train, cfg);
  auto m2 = retrain(f.backbone, f.space, sel, f.data.train, cfg);
  ASSERT_EQ(m1.epoch_loss.size(), 8u);
  EXPECT_LT(m1.epoch_loss.back(), m1.epoch_loss.front());
  EXPECT_EQ(m1.epoch_loss, m2.epoch_loss);
  // parameters are not shared with a search store
  SearchState st(f.backbone, f.space, f.cfg);
  for (const auto& p : m1.net.network.parameters())
    if (st.store.contains(p.name)) ADD_FAILURE() << p.name;
  EXPECT_EQ(m1.net.bayes_suffix_start, 2u);
}
