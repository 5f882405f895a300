#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bayesnas/error.hpp"
#include "bayesnas/eval/metrics.hpp"
#include "json.hpp"

namespace bayesnas {

struct Report {
  std::string csv;
  std::string markdown;
};

namespace detail {

struct MetricColumn {
  const char* label;
  std::optional<double> (*get)(const MetricsRecord&);
};

inline const std::vector<MetricColumn>& report_metrics() {
  static const std::vector<MetricColumn> cols = {
      {"Accuracy", [](const MetricsRecord& m) -> std::optional<double> { return m.accuracy; }},
      {"Certainty", [](const MetricsRecord& m) -> std::optional<double> { return m.certainty; }},
      {"Delta Certainty", [](const MetricsRecord& m) { return m.delta_certainty; }},
      {"NLL", [](const MetricsRecord& m) -> std::optional<double> { return m.nll; }},
      {"F1 Score", [](const MetricsRecord& m) { return m.f1; }},
      {"AUROC", [](const MetricsRecord& m) { return m.auroc; }},
      {"Latency (ms)", [](const MetricsRecord& m) -> std::optional<double> {
         if (m.mean_latency_ms <= 0.0) return std::nullopt;
         return m.mean_latency_ms;
       }},
      {"FLOPs (full)", [](const MetricsRecord& m) -> std::optional<double> { return static_cast<double>(m.flops_full); }},
      {"FLOPs (frozen)",
       [](const MetricsRecord& m) -> std::optional<double> { return static_cast<double>(m.flops_suffix_frozen); }},
  };
  return cols;
}

struct Summary {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
};

inline std::optional<Summary> summarize(const std::vector<const MetricsRecord*>& rs, const MetricColumn& col) {
  std::vector<double> v;
  for (const auto* r : rs)
    if (auto x = col.get(*r)) v.push_back(*x);
  if (v.empty()) return std::nullopt;
  Summary s;
  s.n = v.size();
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(s.n);
  for (double x : v) s.std += (x - s.mean) * (x - s.mean);
  s.std = s.n > 1 ? std::sqrt(s.std / static_cast<double>(s.n - 1)) : 0.0;
  return s;
}

}  // namespace detail

/// Aggregates records into one table per dataset: metrics as rows, models as
/// columns, mean (and std over seeds when there are several).
inline Report make_report(std::vector<MetricsRecord> records) {
  std::sort(records.begin(), records.end(), [](const MetricsRecord& a, const MetricsRecord& b) {
    return std::tie(a.dataset, a.model, a.seed) < std::tie(b.dataset, b.model, b.seed);
  });
  std::map<std::string, std::map<std::string, std::vector<const MetricsRecord*>>> grouped;
  for (const auto& r : records) grouped[r.dataset][r.model].push_back(&r);

  Report rep;
  rep.csv = "dataset,model,metric,mean,std,n\n";
  for (const auto& [dataset, models] : grouped) {
    rep.markdown += "## " + dataset + "\n\n| Metric |";
    for (const auto& [model, rs] : models) rep.markdown += " " + model + " |";
    rep.markdown += "\n|---|";
    for (std::size_t i = 0; i < models.size(); ++i) rep.markdown += "---|";
    rep.markdown += "\n";
    for (const auto& col : detail::report_metrics()) {
      std::string row = std::string("| ") + col.label + " |";
      bool any = false;
      for (const auto& [model, rs] : models) {
        const auto s = detail::summarize(rs, col);
        if (!s) {
          row += " - |";
          continue;
        }
        any = true;
        row += " " + format_number(s->mean) + (s->n > 1 ? " ± " + format_number(s->std) : "") + " |";
        rep.csv += dataset + "," + model + "," + col.label + "," + format_number(s->mean) + "," + format_number(s->std) +
                   "," + std::to_string(s->n) + "\n";
      }
      if (any) rep.markdown += row + "\n";
    }
    rep.markdown += "\n";
  }
  return rep;
}

/// Reads every *.json file under `dir` holding a metrics record or an array
/// of records; other JSON files are skipped.
inline std::vector<MetricsRecord> load_metrics_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("'" + dir + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<MetricsRecord> out;
  for (const auto& p : files) {
    std::ifstream in(p);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw DataError("malformed JSON in '" + p.string() + "'");
    auto is_metrics = [](const nlohmann::json& x) {
      return x.is_object() && x.contains("accuracy") && x.contains("certainty") && x.contains("model");
    };
    if (is_metrics(j)) {
      out.push_back(metrics_from_json(j));
    } else if (j.is_array()) {
      for (const auto& x : j)
        if (is_metrics(x)) out.push_back(metrics_from_json(x));
    }
  }
  return out;
}

}  // namespace bayesnas
