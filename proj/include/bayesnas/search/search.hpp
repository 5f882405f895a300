#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "bayesnas/autodiff/adam.hpp"
#include "bayesnas/autodiff/ops.hpp"
#include "bayesnas/controller/controller.hpp"
#include "bayesnas/error.hpp"
#include "bayesnas/io/dataset.hpp"
#include "bayesnas/nn/network.hpp"
#include "bayesnas/oodgen/vae.hpp"
#include "bayesnas/rng.hpp"
#include "bayesnas/searchspace/assemble.hpp"
#include "bayesnas/searchspace/backbone.hpp"
#include "json.hpp"

namespace bayesnas {

struct SearchConfig {
  double alpha = 0.01;
  double gamma = 0.01;
  double lr_t = 1e-4;
  double lr_arch = 1e-3;
  std::size_t mc_samples_search = 5;
  std::size_t mc_samples_eval = 10;
  int epochs = 100;
  NoiseSchedule noise;  // total_epochs follows `epochs`
  double beta = 1.0;
  double kl_weight = -1.0;  // < 0: 1 / number of training examples
  std::size_t batch_size = 64;
  int theta_steps_per_arch = 1;
  double train_fraction = 0.8;
  double prior_sigma = 1.0;
  ControllerShape controller;
  int retrain_epochs = -1;     // < 0: same as epochs
  double retrain_lr = -1.0;    // < 0: lr_t
  std::uint64_t seed = 0;

  void validate() const {
    if (alpha < 0.0 || gamma < 0.0) throw ConfigError("alpha and gamma must be non-negative");
    if (!(lr_t > 0.0)) throw ConfigError("lr_t must be positive");
    if (!(lr_arch >= 0.0)) throw ConfigError("lr_arch must be non-negative");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (mc_samples_search < 2) throw ConfigError("mc_samples_search must be at least 2");
    if (mc_samples_eval < 1) throw ConfigError("mc_samples_eval must be at least 1");
    if (beta < 0.0) throw ConfigError("beta must be non-negative");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (theta_steps_per_arch < 1) throw ConfigError("theta_steps_per_arch must be at least 1");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must be in (0,1)");
    if (!(prior_sigma > 0.0)) throw ConfigError("prior_sigma must be positive");
    schedule().validate();
  }

  NoiseSchedule schedule() const {
    NoiseSchedule s = noise;
    s.total_epochs = epochs;
    if (s.warmup_epochs > epochs) s.warmup_epochs = epochs;
    return s;
  }

  double kappa(std::size_t num_train) const {
    if (kl_weight >= 0.0) return kl_weight;
    return num_train ? 1.0 / static_cast<double>(num_train) : 0.0;
  }
  int effective_retrain_epochs() const { return retrain_epochs < 0 ? epochs : retrain_epochs; }
  double effective_retrain_lr() const { return retrain_lr < 0.0 ? lr_t : retrain_lr; }
};

struct SplitData {
  Dataset train;
  Dataset val;
  std::size_t num_classes = 0;
  Shape input_shape;
};

/// Stratified split (train_fraction / rest) of one dataset.
inline SplitData split_dataset(const Dataset& d, double train_fraction, std::uint64_t seed) {
  d.validate();
  auto [tr, va] = stratified_split(d, train_fraction, seed);
  if (tr.empty() || va.empty()) throw DataError("dataset too small for a train/validation split");
  return {d.subset(tr), d.subset(va), d.num_classes, d.input_shape};
}

inline SplitData make_split(Dataset train, Dataset val) {
  train.validate();
  val.validate();
  if (train.input_shape != val.input_shape) throw DataError("train and validation inputs differ in shape");
  const std::size_t c = std::max(train.num_classes, val.num_classes);
  train.num_classes = val.num_classes = c;
  Shape s = train.input_shape;
  return {std::move(train), std::move(val), c, s};
}

// ---------------------------------------------------------------------------
// Loss terms

/// Softmax outputs of N stochastic passes (shared deterministic prefix).
inline std::vector<Tensor> softmax_samples(const Network& net, const Tensor& x, std::size_t n, Rng& rng,
                                           ForwardMode mode = ForwardMode::train) {
  auto samples = mc_samples(net, x, n, rng, mode);
  for (auto& s : samples) s = softmax(s);
  return samples;
}

inline Tensor variance_of(const std::vector<Tensor>& probs) { return mean(sample_variance(probs)); }

/// Mean over (examples, classes) of the across-sample variance of the
/// softmax output. Exactly zero for a network without stochastic layers.
inline Tensor predictive_variance(const Network& net, const Tensor& x, std::size_t n_samples, Rng& rng) {
  if (!net.stochastic()) return Tensor::scalar(0.0);
  if (n_samples < 2) throw UsageError("predictive_variance needs at least two samples");
  return variance_of(softmax_samples(net, x, n_samples, rng));
}

/// NLL of the Monte-Carlo mean predictive distribution.
inline Tensor mc_nll(const Network& net, const Tensor& x, std::span<const int> labels, std::size_t n_samples,
                     Rng& rng) {
  return nll_from_probs(average(softmax_samples(net, x, n_samples, rng)), labels);
}

struct TrainLossTerms {
  Tensor total;
  double nll = 0.0;
  double kl = 0.0;
};

/// One stochastic pass: NLL + kappa * sum of KL terms.
inline TrainLossTerms train_loss(const Network& net, const Tensor& x, std::span<const int> labels, double kappa,
                                 Rng& rng) {
  ForwardContext ctx{ForwardMode::train, &rng};
  Tensor nll = softmax_nll(net.forward(x, ctx), labels);
  Tensor kl = net.kl();
  TrainLossTerms t{add(nll, scale(kl, kappa)), nll.item(), kl.item()};
  return t;
}

struct ValLossTerms {
  Tensor total;
  double nll = 0.0;
  double var_id = 0.0;
  double var_ood = 0.0;
};

/// NLL(id) + alpha * Var(id) - gamma * Var(ood). The id terms share one set of
/// samples drawn from rng.fork(1); the OOD samples come from rng.fork(2).
inline ValLossTerms val_loss(const Network& net, const Tensor& id_x, std::span<const int> id_labels,
                             const Tensor& ood_x, double alpha, double gamma, std::size_t n_samples, const Rng& rng) {
  Rng id_rng = rng.fork(1), ood_rng = rng.fork(2);
  const std::size_t n = net.stochastic() ? n_samples : 1;
  if (net.stochastic() && n < 2) throw UsageError("val_loss needs at least two samples for a stochastic network");
  auto id_probs = softmax_samples(net, id_x, n, id_rng);
  Tensor nll = nll_from_probs(average(id_probs), id_labels);
  if (!net.stochastic()) return {nll, nll.item(), 0.0, 0.0};
  Tensor var_id = variance_of(id_probs);
  Tensor var_ood = variance_of(softmax_samples(net, ood_x, n, ood_rng));
  Tensor total = sub(add(nll, scale(var_id, alpha)), scale(var_ood, gamma));
  return {total, nll.item(), var_id.item(), var_ood.item()};
}

// ---------------------------------------------------------------------------
// Search loop

struct StepRecord {
  int epoch = 0;
  std::size_t step = 0;
  ArchitectureSelection selection;
  std::size_t bayes_suffix_start = 0;
  double train_loss = 0.0, train_nll = 0.0, train_kl = 0.0;
  double val_loss = 0.0, val_nll = 0.0, var_id = 0.0, var_ood = 0.0;
};

inline nlohmann::json selection_indices_json(const ArchitectureSelection& sel) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& s : sel.layers) a.push_back({s.expansion, s.activation, s.layer_type, s.kernel});
  return a;
}

inline ArchitectureSelection selection_from_indices(const nlohmann::json& a) {
  ArchitectureSelection sel;
  for (const auto& l : a) {
    sel.layers.push_back(LayerSelection{l.at(0).get<std::size_t>(), l.at(1).get<std::size_t>(),
                                        l.at(2).get<std::size_t>(), l.at(3).get<std::size_t>()});
  }
  return sel;
}

inline nlohmann::json to_json(const StepRecord& r) {
  return {{"type", "step"},
          {"epoch", r.epoch},
          {"step", r.step},
          {"selection", selection_indices_json(r.selection)},
          {"bayes_suffix_start", r.bayes_suffix_start},
          {"train_loss", r.train_loss},
          {"train_nll", r.train_nll},
          {"train_kl", r.train_kl},
          {"val_loss", r.val_loss},
          {"val_nll", r.val_nll},
          {"var_id", r.var_id},
          {"var_ood", r.var_ood}};
}

/// Mutable state of a running search: controller, shared candidate
/// parameters, both optimizers and the random streams.
struct SearchState {
  BackboneSpec backbone;
  CandidateSpace space;
  SearchConfig config;
  Controller controller;
  ParameterStore store;
  Adam theta_opt;
  Adam arch_opt;
  Rng noise_rng;
  Rng data_rng;
  Rng step_rng;
  std::size_t steps = 0;
  int epoch = 0;  // last completed epoch

  SearchState(BackboneSpec b, CandidateSpace s, const SearchConfig& cfg)
      : backbone(std::move(b)), space(std::move(s)), config(cfg), controller(space, cfg.seed ^ 0xC0DEULL, cfg.controller),
        store(cfg.seed ^ 0x5707EULL), theta_opt(cfg.lr_t), arch_opt(cfg.lr_arch), noise_rng(cfg.seed, 1),
        data_rng(cfg.seed, 2), step_rng(cfg.seed, 3) {}
};

namespace detail {

inline void require_finite(double v, const char* what, const StepRecord& r) {
  if (std::isfinite(v)) return;
  throw NumericError(std::string("non-finite ") + what + " at epoch " + std::to_string(r.epoch) + ", step " +
                     std::to_string(r.step) + "; selection " + selection_indices_json(r.selection).dump());
}

}  // namespace detail

/// One architecture step preceded by `theta_steps_per_arch` weight steps:
/// sample a selection with exploration noise, update the shared candidate
/// weights on training batches, then the controller on a validation batch
/// through the straight-through gates.
inline StepRecord search_step(SearchState& st, int epoch, const SplitData& data,
                              const std::vector<std::vector<std::size_t>>& train_batches, const std::vector<std::size_t>& val_batch,
                              const Vae& vae) {
  const SearchConfig& cfg = st.config;
  const NoiseSchedule sched = cfg.schedule();
  StepRecord rec;
  rec.epoch = epoch;
  rec.step = st.steps;
  {
    NoGrad guard;
    rec.selection = select(perturb_all(st.controller.forward(), epoch, sched, st.noise_rng));
  }
  rec.bayes_suffix_start = bayes_suffix_start(st.space, rec.selection);

  AssembleOptions opts;
  opts.store = &st.store;
  opts.input_shape = data.input_shape;
  opts.num_classes = data.num_classes;
  opts.prior_sigma = cfg.prior_sigma;
  const double kappa = cfg.kappa(data.train.size());
  {
    AssembledNetwork net = assemble(st.backbone, st.space, rec.selection, opts);
    const auto params = net.network.parameters();
    for (const auto& idx : train_batches) {
      Adam::zero_grad(params);
      Tensor x = data.train.batch(idx);
      const auto y = data.train.batch_labels(idx);
      Rng fwd = st.step_rng.split();
      GradTape tape;
      TrainLossTerms t = train_loss(net.network, x, y, kappa, fwd);
      rec.train_loss = t.total.item();
      rec.train_nll = t.nll;
      rec.train_kl = t.kl;
      detail::require_finite(rec.train_loss, "training loss", rec);
      tape.backward(t.total);
      st.theta_opt.step(params);
    }
    Adam::zero_grad(params);
  }

  const auto arch_params = st.controller.arch_parameters();
  Adam::zero_grad(arch_params);
  Tensor vx = data.val.batch(val_batch);
  const auto vy = data.val.batch_labels(val_batch);
  Rng ood_rng = st.step_rng.split();
  Tensor ood = generate_ood(vae, vx, cfg.beta, ood_rng);
  const Rng val_rng = st.step_rng.split();
  {
    GradTape tape;
    const AxisProbabilities probs = st.controller.forward();
    AssembleOptions gated = opts;
    gated.gates = &probs;
    AssembledNetwork net = assemble(st.backbone, st.space, rec.selection, gated);
    ValLossTerms v = val_loss(net.network, vx, vy, ood, cfg.alpha, cfg.gamma, cfg.mc_samples_search, val_rng);
    rec.val_loss = v.total.item();
    rec.val_nll = v.nll;
    rec.var_id = v.var_id;
    rec.var_ood = v.var_ood;
    detail::require_finite(rec.val_loss, "validation loss", rec);
    tape.backward(v.total);
    st.arch_opt.step(arch_params);
    Adam::zero_grad(net.network.parameters());
  }
  Adam::zero_grad(arch_params);
  ++st.steps;
  return rec;
}

struct SearchResult {
  ArchitectureSelection selection;          // noiseless argmax after the last epoch
  std::vector<std::string> trajectory;      // JSON lines
  std::vector<std::string> warnings;
};

using TrajectorySink = std::function<void(const std::string&)>;

/// Runs `epochs` epochs (numbered 1..epochs so the last one is noise-free).
/// Each epoch walks the shuffled training split in groups of
/// `theta_steps_per_arch` batches, pairing each group with the next
/// validation batch.
inline SearchResult run_search(SearchState& st, const SplitData& data, const Vae& vae, const TrajectorySink& sink = {}) {
  const SearchConfig& cfg = st.config;
  cfg.validate();
  if (data.train.empty() || data.val.empty()) throw DataError("search needs non-empty train and validation splits");
  SearchResult res;
  auto emit = [&](const nlohmann::json& j) {
    std::string line = j.dump();
    if (sink) sink(line);
    res.trajectory.push_back(std::move(line));
  };
  const double kappa = cfg.kappa(data.train.size());
  for (int epoch = st.epoch + 1; epoch <= cfg.epochs; ++epoch) {
    auto train_batches = make_batches(data.train.all_indices(), cfg.batch_size, &st.data_rng);
    auto val_batches = make_batches(data.val.all_indices(), cfg.batch_size, &st.data_rng);
    double sum_nll = 0.0, sum_var_id = 0.0, sum_var_ood = 0.0, sum_kl = 0.0;
    std::size_t n = 0, vi = 0;
    for (std::size_t b = 0; b < train_batches.size(); b += static_cast<std::size_t>(cfg.theta_steps_per_arch)) {
      const std::size_t e = std::min(train_batches.size(), b + static_cast<std::size_t>(cfg.theta_steps_per_arch));
      std::vector<std::vector<std::size_t>> group(train_batches.begin() + static_cast<std::ptrdiff_t>(b),
                                                  train_batches.begin() + static_cast<std::ptrdiff_t>(e));
      StepRecord r = search_step(st, epoch, data, group, val_batches[vi % val_batches.size()], vae);
      ++vi;
      emit(to_json(r));
      sum_nll += r.val_nll;
      sum_var_id += r.var_id;
      sum_var_ood += r.var_ood;
      sum_kl += r.train_kl;
      ++n;
    }
    st.epoch = epoch;
    ArchitectureSelection current;
    {
      NoGrad guard;
      current = select(probabilities_to_scores(st.controller.forward()));
    }
    const double dn = static_cast<double>(n);
    const double nll = sum_nll / dn;
    nlohmann::json ratios = {{"alpha_var_id", cfg.alpha * sum_var_id / dn / nll},
                             {"gamma_var_ood", cfg.gamma * sum_var_ood / dn / nll},
                             {"kappa_kl", kappa * sum_kl / dn / nll}};
    emit({{"type", "epoch"},
          {"epoch", epoch},
          {"argmax_selection", selection_indices_json(current)},
          {"mean_val_nll", nll},
          {"term_to_nll", ratios}});
    for (const auto& [name, v] : ratios.items()) {
      const double r = v.get<double>();
      if (r != 0.0 && std::isfinite(r) && (r < 0.01 || r > 100.0)) {
        std::ostringstream msg;
        msg << "epoch " << epoch << ": loss term " << name << " is " << r << " x NLL (outside [0.01, 100])";
        res.warnings.push_back(msg.str());
      }
    }
  }
  NoGrad guard;
  res.selection = select(probabilities_to_scores(st.controller.forward()));
  return res;
}

/// Replays a trajectory and returns the per-step selections.
inline std::vector<ArchitectureSelection> replay_selections(const std::vector<std::string>& lines) {
  std::vector<ArchitectureSelection> out;
  for (const auto& l : lines) {
    const auto j = nlohmann::json::parse(l);
    if (j.at("type") == "step") out.push_back(selection_from_indices(j.at("selection")));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Retraining

struct TrainedModel {
  AssembledNetwork net;
  ParameterStore store;
  ArchitectureSelection selection;
  std::vector<double> epoch_loss;
};

struct TrainOptions {
  int epochs = 10;
  double lr = 1e-3;
  std::size_t batch_size = 64;
  double kappa = -1.0;  // < 0: 1 / number of training examples
  double prior_sigma = 1.0;
  double dropout_p = 0.0;
  std::uint64_t seed = 0;
};

/// Trains freshly initialized parameters for a fixed selection.
inline TrainedModel train_selection(const BackboneSpec& backbone, const CandidateSpace& space,
                                    const ArchitectureSelection& sel, const Dataset& train, const TrainOptions& o) {
  if (train.empty()) throw DataError("training set is empty");
  if (o.epochs < 0) throw ConfigError("epochs must be non-negative");
  TrainedModel m{AssembledNetwork{}, ParameterStore(o.seed ^ 0x7E7EULL), sel, {}};
  AssembleOptions opts;
  opts.store = &m.store;
  opts.input_shape = train.input_shape;
  opts.num_classes = train.num_classes;
  opts.prior_sigma = o.prior_sigma;
  opts.dropout_p = o.dropout_p;
  m.net = assemble(backbone, space, sel, opts);
  const auto params = m.net.network.parameters();
  const double kappa = o.kappa >= 0.0 ? o.kappa : 1.0 / static_cast<double>(train.size());
  Adam adam(o.lr);
  Rng data_rng(o.seed, 11), fwd_rng(o.seed, 12);
  for (int epoch = 0; epoch < o.epochs; ++epoch) {
    double total = 0.0;
    for (const auto& idx : make_batches(train.all_indices(), o.batch_size, &data_rng)) {
      Adam::zero_grad(params);
      Tensor x = train.batch(idx);
      const auto y = train.batch_labels(idx);
      Rng r = fwd_rng.split();
      GradTape tape;
      TrainLossTerms t = train_loss(m.net.network, x, y, kappa, r);
      if (!std::isfinite(t.total.item())) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
      }
      tape.backward(t.total);
      adam.step(params);
      total += t.total.item() * static_cast<double>(idx.size());
    }
    m.epoch_loss.push_back(total / static_cast<double>(train.size()));
  }
  Adam::zero_grad(params);
  return m;
}

inline TrainedModel retrain(const BackboneSpec& backbone, const CandidateSpace& space, const ArchitectureSelection& sel,
                            const Dataset& train, const SearchConfig& cfg) {
  TrainOptions o;
  o.epochs = cfg.effective_retrain_epochs();
  o.lr = cfg.effective_retrain_lr();
  o.batch_size = cfg.batch_size;
  o.kappa = cfg.kl_weight;
  o.prior_sigma = cfg.prior_sigma;
  o.seed = cfg.seed ^ 0x2E7EULL;
  return train_selection(backbone, space, sel, train, o);
}

}  // namespace bayesnas
