#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bayesnas/autodiff/ops.hpp"
#include "bayesnas/error.hpp"
#include "bayesnas/nn/network.hpp"
#include "bayesnas/rng.hpp"
#include "json.hpp"

namespace bayesnas {

/// Mean of N softmax outputs [b x c] (prefix computed once).
inline Tensor predict_mc(const Network& net, const Tensor& x, std::size_t n, Rng& rng) {
  NoGrad guard;
  auto samples = mc_samples(net, x, n, rng, ForwardMode::mc_eval);
  for (auto& s : samples) s = softmax(s);
  return average(samples);
}

/// Batched predict_mc over a large input, concatenated in order.
inline Tensor predict_mc_batched(const Network& net, const Tensor& x, std::size_t n, Rng& rng,
                                 std::size_t batch = 256) {
  const std::size_t total = x.dim(0);
  if (total <= batch) return predict_mc(net, x, n, rng);
  const std::size_t per = x.numel() / total;
  std::vector<double> out;
  std::size_t classes = 0;
  for (std::size_t s = 0; s < total; s += batch) {
    const std::size_t e = std::min(total, s + batch);
    Shape sh = x.shape();
    sh[0] = e - s;
    Tensor xb(sh, std::vector<double>(x.data().begin() + static_cast<std::ptrdiff_t>(s * per),
                                      x.data().begin() + static_cast<std::ptrdiff_t>(e * per)));
    Tensor p = predict_mc(net, xb, n, rng);
    classes = p.dim(1);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return Tensor(Shape{total, classes}, std::move(out));
}

namespace detail {

inline void require_probs(const Tensor& p) {
  if (p.rank() != 2 || p.dim(0) == 0 || p.dim(1) == 0) {
    throw DimensionError("expected a non-empty [b x c] probability matrix, got " + shape_str(p.shape()));
  }
}

inline void require_labels(const Tensor& p, std::span<const int> labels) {
  require_probs(p);
  if (labels.size() != p.dim(0)) {
    throw DimensionError(std::to_string(labels.size()) + " labels for " + std::to_string(p.dim(0)) + " predictions");
  }
}

}  // namespace detail

/// Mean over rows of the largest class probability; for two classes this is
/// max(p, 1 - p).
inline double certainty(const Tensor& probs) {
  detail::require_probs(probs);
  const std::size_t b = probs.dim(0), c = probs.dim(1);
  double acc = 0.0;
  for (std::size_t i = 0; i < b; ++i) acc += *std::max_element(probs.data().begin() + static_cast<std::ptrdiff_t>(i * c),
                                                               probs.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
  return acc / static_cast<double>(b);
}

inline double delta_certainty(double id_certainty, double ood_certainty) { return id_certainty - ood_certainty; }

/// Argmax with lowest-index ties.
inline std::vector<int> predicted_labels(const Tensor& probs) {
  detail::require_probs(probs);
  const std::size_t b = probs.dim(0), c = probs.dim(1);
  std::vector<int> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (probs[i * c + j] > probs[i * c + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

inline double accuracy(const Tensor& probs, std::span<const int> labels) {
  detail::require_labels(probs, labels);
  const auto pred = predicted_labels(probs);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

inline double nll(const Tensor& probs, std::span<const int> labels) {
  detail::require_labels(probs, labels);
  const std::size_t c = probs.dim(1);
  double acc = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) throw DataError("label out of range");
    acc -= std::log(std::max(probs[i * c + static_cast<std::size_t>(labels[i])], kProbabilityFloor));
  }
  return acc / static_cast<double>(labels.size());
}

/// Binary F1 of the positive class (index 1) at threshold 0.5.
inline double f1_score(const Tensor& probs, std::span<const int> labels) {
  detail::require_labels(probs, labels);
  if (probs.dim(1) != 2) throw DimensionError("F1 is defined for binary tasks only");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pred = probs[i * 2 + 1] >= 0.5;
    const bool pos = labels[i] == 1;
    tp += pred && pos;
    fp += pred && !pos;
    fn += !pred && pos;
  }
  if (tp == 0) return 0.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

/// Area under the ROC curve of `scores` for binary labels via the
/// Mann-Whitney rank statistic (ties get average ranks).
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("auroc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  double pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i] == 1) {
      pos += 1.0;
      rank_sum += rank[i];
    }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) throw DataError("auroc needs both positive and negative labels");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

/// AUROC of the positive-class probability of a binary probability matrix.
inline double auroc(const Tensor& probs, std::span<const int> labels) {
  detail::require_labels(probs, labels);
  if (probs.dim(1) != 2) throw DimensionError("AUROC is defined for binary tasks only");
  std::vector<double> s(labels.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = probs[i * 2 + 1];
  return auroc(std::span<const double>(s), labels);
}

struct MetricsRecord {
  std::string dataset;
  std::string model;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double certainty = 0.0;
  std::optional<double> delta_certainty;
  double nll = 0.0;
  std::optional<double> f1;
  std::optional<double> auroc;
  double mean_latency_ms = 0.0;
  double latency_std = 0.0;
  std::uint64_t flops_full = 0;
  std::uint64_t flops_suffix_frozen = 0;

  bool operator==(const MetricsRecord&) const = default;
};

/// Accuracy / certainty / NLL (and F1 / AUROC for binary tasks) of a
/// probability matrix against labels; optional OOD probabilities add
/// delta-certainty.
inline MetricsRecord compute_metrics(const Tensor& probs, std::span<const int> labels, const Tensor* ood_probs = nullptr) {
  MetricsRecord m;
  m.accuracy = accuracy(probs, labels);
  m.certainty = certainty(probs);
  m.nll = nll(probs, labels);
  if (ood_probs) m.delta_certainty = delta_certainty(m.certainty, certainty(*ood_probs));
  if (probs.dim(1) == 2) {
    m.f1 = f1_score(probs, labels);
    bool has_pos = false, has_neg = false;
    for (int l : labels) (l == 1 ? has_pos : has_neg) = true;
    if (has_pos && has_neg) m.auroc = auroc(probs, labels);
  }
  return m;
}

inline nlohmann::json to_json(const MetricsRecord& m) {
  nlohmann::json j = {{"dataset", m.dataset},
                      {"model", m.model},
                      {"seed", m.seed},
                      {"accuracy", m.accuracy},
                      {"certainty", m.certainty},
                      {"nll", m.nll},
                      {"mean_latency_ms", m.mean_latency_ms},
                      {"latency_std", m.latency_std},
                      {"flops_full", m.flops_full},
                      {"flops_suffix_frozen", m.flops_suffix_frozen}};
  j["delta_certainty"] = m.delta_certainty ? nlohmann::json(*m.delta_certainty) : nlohmann::json(nullptr);
  j["f1"] = m.f1 ? nlohmann::json(*m.f1) : nlohmann::json(nullptr);
  j["auroc"] = m.auroc ? nlohmann::json(*m.auroc) : nlohmann::json(nullptr);
  return j;
}

inline MetricsRecord metrics_from_json(const nlohmann::json& j) {
  MetricsRecord m;
  try {
    m.dataset = j.at("dataset").get<std::string>();
    m.model = j.at("model").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.accuracy = j.at("accuracy").get<double>();
    m.certainty = j.at("certainty").get<double>();
    m.nll = j.at("nll").get<double>();
    m.mean_latency_ms = j.value("mean_latency_ms", 0.0);
    m.latency_std = j.value("latency_std", 0.0);
    m.flops_full = j.value("flops_full", std::uint64_t{0});
    m.flops_suffix_frozen = j.value("flops_suffix_frozen", std::uint64_t{0});
    auto opt = [&](const char* k) -> std::optional<double> {
      if (!j.contains(k) || j[k].is_null()) return std::nullopt;
      return j[k].get<double>();
    };
    m.delta_certainty = opt("delta_certainty");
    m.f1 = opt("f1");
    m.auroc = opt("auroc");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed metrics record: ") + e.what());
  }
  return m;
}

inline std::string metrics_csv_header() {
  return "dataset,model,seed,accuracy,certainty,delta_certainty,nll,f1,auroc,mean_latency_ms,latency_std,flops_full,"
         "flops_suffix_frozen";
}

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

inline std::string metrics_csv_row(const MetricsRecord& m) {
  auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
  return m.dataset + "," + m.model + "," + std::to_string(m.seed) + "," + format_number(m.accuracy) + "," +
         format_number(m.certainty) + "," + opt(m.delta_certainty) + "," + format_number(m.nll) + "," + opt(m.f1) +
         "," + opt(m.auroc) + "," + format_number(m.mean_latency_ms) + "," + format_number(m.latency_std) + "," +
         std::to_string(m.flops_full) + "," + std::to_string(m.flops_suffix_frozen);
}

}  // namespace bayesnas
