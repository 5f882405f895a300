#pragma once

#include <string>

#include "bayesnas/error.hpp"
#include "bayesnas/searchspace/assemble.hpp"
#include "bayesnas/searchspace/backbone.hpp"
#include "bayesnas/searchspace/candidates.hpp"
#include "json.hpp"

namespace bayesnas {

/// Human-readable selection document: one entry per layer with the chosen
/// candidate values (not indices), in backbone order.
inline nlohmann::json selection_to_json(const BackboneSpec& backbone, const CandidateSpace& space,
                                        const ArchitectureSelection& sel) {
  validate_selection(space, sel);
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < space.size(); ++l) {
    const auto& c = space[l];
    const auto& s = sel.layers[l];
    nlohmann::json j;
    j["name"] = backbone.layers.at(l).name;
    j["expansion"] = c.expansions[s.expansion];
    j["activation"] = std::string(to_string(c.activations[s.activation]));
    j["layer_type"] = std::string(to_string(c.layer_types[s.layer_type]));
    if (!c.kernel_sizes.empty()) j["kernel"] = c.kernel_sizes[s.kernel];
    layers.push_back(std::move(j));
  }
  nlohmann::json doc;
  doc["backbone"] = backbone.name;
  doc["layers"] = std::move(layers);
  doc["bayes_suffix_start"] = bayes_suffix_start(space, sel);
  return doc;
}

inline ArchitectureSelection selection_from_json(const nlohmann::json& doc, const BackboneSpec& backbone,
                                                 const CandidateSpace& space) {
  if (!doc.is_object() || !doc.contains("layers") || !doc["layers"].is_array()) {
    throw ConfigError("selection document must be an object with a 'layers' array");
  }
  if (doc.contains("backbone") && doc["backbone"].get<std::string>() != backbone.name) {
    throw ConfigError("selection is for backbone '" + doc["backbone"].get<std::string>() + "', not '" +
                      backbone.name + "'");
  }
  const auto& layers = doc["layers"];
  if (layers.size() != space.size()) {
    throw SelectionError("selection lists " + std::to_string(layers.size()) + " layers, expected " +
                         std::to_string(space.size()));
  }
  ArchitectureSelection sel;
  for (std::size_t l = 0; l < space.size(); ++l) {
    const auto& j = layers[l];
    const auto& c = space[l];
    auto index_of = [&](const auto& list, const auto& v, const char* what) -> std::size_t {
      for (std::size_t i = 0; i < list.size(); ++i)
        if (list[i] == v) return i;
      throw SelectionError("layer " + std::to_string(l) + ": " + what + " value not among candidates");
    };
    try {
      if (j.contains("name") && j["name"].get<std::string>() != backbone.layers.at(l).name) {
        throw SelectionError("layer " + std::to_string(l) + " is named '" + j["name"].get<std::string>() +
                             "', expected '" + backbone.layers.at(l).name + "'");
      }
      LayerSelection s;
      s.expansion = index_of(c.expansions, j.at("expansion").get<double>(), "expansion");
      s.activation = index_of(c.activations, parse_activation(j.at("activation").get<std::string>()), "activation");
      s.layer_type = index_of(c.layer_types, parse_layer_type(j.at("layer_type").get<std::string>()), "layer_type");
      if (!c.kernel_sizes.empty()) s.kernel = index_of(c.kernel_sizes, j.at("kernel").get<int>(), "kernel");
      sel.layers.push_back(s);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("selection layer " + std::to_string(l) + ": " + e.what());
    }
  }
  return sel;
}

}  // namespace bayesnas
