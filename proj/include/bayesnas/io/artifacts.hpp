#pragma once

#include <string>

#include "bayesnas/io/checkpoint.hpp"
#include "bayesnas/io/dataset.hpp"
#include "bayesnas/oodgen/vae.hpp"
#include "bayesnas/search/search.hpp"
#include "bayesnas/searchspace/selection_json.hpp"
#include "json.hpp"

namespace bayesnas {

inline nlohmann::json normalization_json(const Normalization& n) {
  return {{"mean", n.mean}, {"stddev", n.stddev}};
}

inline Normalization normalization_from_json(const nlohmann::json& j) {
  Normalization n;
  if (j.is_object()) {
    n.mean = j.value("mean", std::vector<double>{});
    n.stddev = j.value("stddev", std::vector<double>{});
  }
  return n;
}

// ---------------------------------------------------------------------------
// VAE

inline void save_vae(const Vae& vae, const std::string& path) {
  const VaeOptions& o = vae.options();
  Checkpoint ck;
  ck.kind = "vae";
  ck.seed = o.seed;
  ck.groups["vae"] = capture(vae.parameters());
  ck.metadata = {{"input_shape", vae.input_shape()},
                 {"feature_kind", vae.kind() == FeatureKind::image ? "image" : "tabular"},
                 {"variant", std::string(to_string(o.variant))},
                 {"base_channels", o.base_channels},
                 {"hidden", o.hidden},
                 {"latent", vae.latent()},
                 {"epochs", o.epochs},
                 {"lr", o.lr},
                 {"batch_size", o.batch_size},
                 {"trained", vae.trained()},
                 {"data_lo", vae.data_lo()},
                 {"data_hi", vae.data_hi()}};
  save_checkpoint(ck, path);
}

inline Vae load_vae(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.kind != "vae") throw DataError("'" + path + "' is a " + ck.kind + " checkpoint, expected a VAE");
  const auto& m = ck.metadata;
  try {
    VaeOptions o;
    o.variant = parse_vae_variant(m.at("variant").get<std::string>());
    o.base_channels = m.at("base_channels").get<std::size_t>();
    o.hidden = m.at("hidden").get<std::size_t>();
    o.latent = m.at("latent").get<std::size_t>();
    o.epochs = m.at("epochs").get<int>();
    o.lr = m.at("lr").get<double>();
    o.batch_size = m.at("batch_size").get<std::size_t>();
    o.seed = ck.seed;
    const FeatureKind kind = m.at("feature_kind").get<std::string>() == "image" ? FeatureKind::image : FeatureKind::tabular;
    Vae vae(m.at("input_shape").get<Shape>(), kind, o);
    restore_into(ck.groups.at("vae"), vae.parameters(), "VAE checkpoint");
    if (m.at("trained").get<bool>()) vae.mark_trained(m.at("data_lo").get<double>(), m.at("data_hi").get<double>());
    return vae;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("VAE checkpoint '" + path + "' is missing metadata: " + e.what());
  } catch (const std::out_of_range&) {
    throw DataError("VAE checkpoint '" + path + "' has no parameter group");
  }
}

// ---------------------------------------------------------------------------
// Trained model (fixed selection)

struct ModelInfo {
  std::string backbone;
  Shape input_shape;
  std::size_t num_classes = 0;
  double prior_sigma = 1.0;
  double dropout_p = 0.0;
  Normalization normalization;
  std::string dataset_tag;
  std::string model_tag = "nas";
};

inline void save_model(const TrainedModel& m, const BackboneSpec& backbone, const CandidateSpace& space,
                       const ModelInfo& info, std::uint64_t seed, const std::string& path) {
  Checkpoint ck;
  ck.kind = "model";
  ck.seed = seed;
  ck.groups["model"] = capture(m.store.named());
  ck.selection = selection_to_json(backbone, space, m.selection);
  ck.metadata = {{"backbone", backbone.name},
                 {"input_shape", info.input_shape},
                 {"num_classes", info.num_classes},
                 {"prior_sigma", info.prior_sigma},
                 {"dropout_p", info.dropout_p},
                 {"normalization", normalization_json(info.normalization)},
                 {"dataset", info.dataset_tag},
                 {"model_tag", info.model_tag},
                 {"epoch_loss", m.epoch_loss}};
  save_checkpoint(ck, path);
}

struct LoadedModel {
  BackboneSpec backbone;
  CandidateSpace space;
  ModelInfo info;
  TrainedModel model;
  std::uint64_t seed = 0;
};

inline LoadedModel load_model(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.kind != "model") throw DataError("'" + path + "' is a " + ck.kind + " checkpoint, expected a model");
  LoadedModel out;
  out.seed = ck.seed;
  try {
    const auto& m = ck.metadata;
    out.backbone = backbone_by_name(m.at("backbone").get<std::string>());
    out.space = default_candidates(out.backbone);
    out.info.backbone = out.backbone.name;
    out.info.input_shape = m.at("input_shape").get<Shape>();
    out.info.num_classes = m.at("num_classes").get<std::size_t>();
    out.info.prior_sigma = m.at("prior_sigma").get<double>();
    out.info.dropout_p = m.at("dropout_p").get<double>();
    out.info.normalization = normalization_from_json(m.value("normalization", nlohmann::json()));
    out.info.dataset_tag = m.value("dataset", std::string());
    out.info.model_tag = m.value("model_tag", std::string("nas"));
    out.model.epoch_loss = m.value("epoch_loss", std::vector<double>{});
  } catch (const nlohmann::json::exception& e) {
    throw DataError("model checkpoint '" + path + "' is missing metadata: " + e.what());
  }
  out.model.selection = selection_from_json(ck.selection, out.backbone, out.space);
  auto git = ck.groups.find("model");
  if (git == ck.groups.end()) throw DataError("model checkpoint '" + path + "' has no parameter group");
  for (const auto& [name, p] : git->second) out.model.store.insert(name, Tensor::parameter(p.shape, p.values));
  AssembleOptions opts;
  opts.store = &out.model.store;
  opts.input_shape = out.info.input_shape;
  opts.num_classes = out.info.num_classes;
  opts.prior_sigma = out.info.prior_sigma;
  opts.dropout_p = out.info.dropout_p;
  const std::size_t before = out.model.store.size();
  out.model.net = assemble(out.backbone, out.space, out.model.selection, opts);
  if (out.model.store.size() != before) throw DataError("model checkpoint '" + path + "' lacks parameters for its selection");
  return out;
}

// ---------------------------------------------------------------------------
// Search state

inline void save_search(const SearchState& st, const ArchitectureSelection& selection, const std::string& path) {
  Checkpoint ck;
  ck.kind = "search";
  ck.seed = st.config.seed;
  ck.groups["controller"] = capture(st.controller.arch_parameters());
  ck.groups["candidates"] = capture(st.store.named());
  ck.optimizers["theta"] = snapshot(st.theta_opt);
  ck.optimizers["arch"] = snapshot(st.arch_opt);
  ck.selection = selection_to_json(st.backbone, st.space, selection);
  ck.metadata = {{"backbone", st.backbone.name}, {"epoch", st.epoch}, {"steps", st.steps}};
  save_checkpoint(ck, path);
}

/// Restores controller, candidate parameters and optimizer states into a
/// freshly constructed state with the same backbone and config.
inline void restore_search(SearchState& st, const Checkpoint& ck) {
  if (ck.kind != "search") throw DataError("checkpoint is a " + ck.kind + " checkpoint, expected a search");
  restore_into(ck.groups.at("controller"), st.controller.arch_parameters(), "controller");
  for (const auto& [name, p] : ck.groups.at("candidates")) st.store.insert(name, Tensor::parameter(p.shape, p.values));
  st.theta_opt = restore_optimizer(ck.optimizers.at("theta"));
  st.arch_opt = restore_optimizer(ck.optimizers.at("arch"));
  st.epoch = ck.metadata.value("epoch", 0);
  st.steps = ck.metadata.value("steps", std::size_t{0});
}

}  // namespace bayesnas
