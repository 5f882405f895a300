#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>

#include "bayesnas/error.hpp"
#include "bayesnas/eval/baselines.hpp"
#include "bayesnas/io/csv.hpp"
#include "bayesnas/io/dataset.hpp"
#include "bayesnas/io/idx.hpp"
#include "bayesnas/io/synth.hpp"
#include "bayesnas/oodgen/transforms.hpp"
#include "bayesnas/oodgen/vae.hpp"
#include "bayesnas/search/search.hpp"
#include "json.hpp"

namespace bayesnas {

/// Everything a CLI command may need. Sections mirror the JSON layout:
/// top-level run fields plus "search", "vae", "baseline", "eval".
struct RunConfig {
  std::uint64_t seed = 0;
  std::string backbone = "mlp";
  std::string dataset;       // dataset spec, see load_dataset_spec
  std::string val_dataset;   // optional; otherwise a stratified split of `dataset`
  std::string test_dataset;  // optional; eval/baseline fall back to the validation split
  std::string output_dir = "out";
  SearchConfig search;
  VaeOptions vae;
  BaselineOptions baseline;
  EvalOptions eval;
  std::string ood = "white_noise";  // OOD inputs for evaluation: a baseline transform or "vae"
  std::string label_column;         // CSV label column (default: last)

  void validate() const {
    backbone_by_name(backbone);
    search.validate();
    if (vae.epochs < 0 || !(vae.lr > 0.0) || vae.batch_size == 0) throw ConfigError("invalid VAE training options");
    if (baseline.train.epochs < 0 || !(baseline.train.lr > 0.0) || baseline.train.batch_size == 0) {
      throw ConfigError("invalid baseline training options");
    }
    if (baseline.dropout_p < 0.0 || baseline.dropout_p >= 1.0) throw ConfigError("dropout_p must be in [0,1)");
    if (eval.mc_samples == 0) throw ConfigError("eval mc_samples must be positive");
    if (ood != "vae") parse_baseline_ood(ood);
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  using detail::check_keys;
  using detail::read;
  RunConfig c;
  check_keys(j,
             {"seed", "backbone", "dataset", "val_dataset", "test_dataset", "output_dir", "search", "vae", "baseline",
              "eval", "ood", "label_column"},
             "config");
  read(j, "seed", c.seed, "config");
  read(j, "backbone", c.backbone, "config");
  read(j, "dataset", c.dataset, "config");
  read(j, "val_dataset", c.val_dataset, "config");
  read(j, "test_dataset", c.test_dataset, "config");
  read(j, "output_dir", c.output_dir, "config");
  read(j, "ood", c.ood, "config");
  read(j, "label_column", c.label_column, "config");

  if (j.contains("search")) {
    const auto& s = j["search"];
    check_keys(s,
               {"alpha", "gamma", "lr_t", "lr_arch", "mc_samples_search", "mc_samples_eval", "epochs", "beta",
                "kl_weight", "batch_size", "theta_steps_per_arch", "train_fraction", "prior_sigma", "noise",
                "controller", "retrain_epochs", "retrain_lr"},
               "search");
    auto& o = c.search;
    read(s, "alpha", o.alpha, "search");
    read(s, "gamma", o.gamma, "search");
    read(s, "lr_t", o.lr_t, "search");
    read(s, "lr_arch", o.lr_arch, "search");
    read(s, "mc_samples_search", o.mc_samples_search, "search");
    read(s, "mc_samples_eval", o.mc_samples_eval, "search");
    read(s, "epochs", o.epochs, "search");
    read(s, "beta", o.beta, "search");
    read(s, "kl_weight", o.kl_weight, "search");
    read(s, "batch_size", o.batch_size, "search");
    read(s, "theta_steps_per_arch", o.theta_steps_per_arch, "search");
    read(s, "train_fraction", o.train_fraction, "search");
    read(s, "prior_sigma", o.prior_sigma, "search");
    read(s, "retrain_epochs", o.retrain_epochs, "search");
    read(s, "retrain_lr", o.retrain_lr, "search");
    if (s.contains("noise")) {
      const auto& n = s["noise"];
      check_keys(n, {"lambda_n", "warmup_epochs", "normalized"}, "search.noise");
      read(n, "lambda_n", o.noise.lambda_n, "search.noise");
      read(n, "warmup_epochs", o.noise.warmup_epochs, "search.noise");
      read(n, "normalized", o.noise.normalized, "search.noise");
    }
    if (s.contains("controller")) {
      const auto& n = s["controller"];
      check_keys(n, {"embedding", "hidden", "depth"}, "search.controller");
      read(n, "embedding", o.controller.embedding, "search.controller");
      read(n, "hidden", o.controller.hidden, "search.controller");
      read(n, "depth", o.controller.depth, "search.controller");
    }
  }
  if (j.contains("vae")) {
    const auto& v = j["vae"];
    check_keys(v, {"variant", "base_channels", "hidden", "latent", "epochs", "lr", "batch_size"}, "vae");
    std::string variant = std::string(to_string(c.vae.variant));
    read(v, "variant", variant, "vae");
    c.vae.variant = parse_vae_variant(variant);
    read(v, "base_channels", c.vae.base_channels, "vae");
    read(v, "hidden", c.vae.hidden, "vae");
    read(v, "latent", c.vae.latent, "vae");
    read(v, "epochs", c.vae.epochs, "vae");
    read(v, "lr", c.vae.lr, "vae");
    read(v, "batch_size", c.vae.batch_size, "vae");
  }
  if (j.contains("baseline")) {
    const auto& b = j["baseline"];
    check_keys(b, {"epochs", "lr", "batch_size", "kl_weight", "dropout_p", "ensemble_size", "expansion", "activation",
                   "kernel"},
               "baseline");
    auto& o = c.baseline;
    read(b, "epochs", o.train.epochs, "baseline");
    read(b, "lr", o.train.lr, "baseline");
    read(b, "batch_size", o.train.batch_size, "baseline");
    read(b, "kl_weight", o.train.kappa, "baseline");
    read(b, "dropout_p", o.dropout_p, "baseline");
    read(b, "ensemble_size", o.ensemble_size, "baseline");
    read(b, "expansion", o.expansion, "baseline");
    read(b, "kernel", o.kernel, "baseline");
    std::string act = std::string(to_string(o.activation));
    read(b, "activation", act, "baseline");
    o.activation = parse_activation(act);
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    check_keys(e, {"mc_samples", "latency_runs", "latency_batch"}, "eval");
    read(e, "mc_samples", c.eval.mc_samples, "eval");
    read(e, "latency_runs", c.eval.latency_runs, "eval");
    read(e, "latency_batch", c.eval.latency_batch, "eval");
  } else {
    c.eval.mc_samples = c.search.mc_samples_eval;
  }
  return c;
}

/// Applies the BAYESNAS_SEED override and propagates the seed into sections.
inline void finalize_run_config(RunConfig& c) {
  if (const char* env = std::getenv("BAYESNAS_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') throw ConfigError(std::string("BAYESNAS_SEED is not an integer: '") + env + "'");
    c.seed = v;
  }
  c.search.seed = c.seed;
  c.vae.seed = c.seed;
  c.vae.batch_size = c.vae.batch_size ? c.vae.batch_size : c.search.batch_size;
  c.baseline.train.seed = c.seed;
  c.baseline.train.prior_sigma = c.search.prior_sigma;
  c.eval.seed = c.seed;
  c.validate();
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config '" + path + "' is not valid JSON");
  RunConfig c = parse_run_config(j);
  finalize_run_config(c);
  return c;
}

// ---------------------------------------------------------------------------
// Dataset specs

/// "idx:IMAGES,LABELS", "csv:PATH[:LABEL_COLUMN]", "synth:gaussians|moons:N:SEED[:SEPARATION]".
inline Dataset load_dataset_spec(const std::string& spec, const std::string& label_column = "",
                                 const Normalization* fixed = nullptr) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) throw ConfigError("dataset spec '" + spec + "' lacks a 'kind:' prefix");
  const std::string kind = spec.substr(0, colon), rest = spec.substr(colon + 1);
  if (kind == "idx") {
    const auto comma = rest.find(',');
    if (comma == std::string::npos) throw ConfigError("idx dataset spec needs 'idx:IMAGES,LABELS'");
    return load_idx(rest.substr(0, comma), rest.substr(comma + 1));
  }
  if (kind == "csv") {
    std::string path = rest, label = label_column;
    if (!std::filesystem::exists(path)) {
      const auto c2 = rest.rfind(':');
      if (c2 != std::string::npos) {
        path = rest.substr(0, c2);
        label = rest.substr(c2 + 1);
      }
    }
    Dataset d = load_csv(path, label, fixed);
    d.tag = std::filesystem::path(path).stem().string();
    return d;
  }
  if (kind == "synth") {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
      const auto e = rest.find(':', start);
      parts.push_back(rest.substr(start, e - start));
      if (e == std::string::npos) break;
      start = e + 1;
    }
    if (parts.size() < 3 || parts.size() > 4) throw ConfigError("synth spec needs 'synth:KIND:N:SEED[:SEPARATION]'");
    try {
      SynthOptions o;
      if (parts.size() == 4) o.separation = std::stod(parts[3]);
      return synth_dataset(parse_synth_kind(parts[0]), std::stoull(parts[1]), std::stoull(parts[2]), o);
    } catch (const std::logic_error&) {
      throw ConfigError("synth spec '" + spec + "' has a non-numeric field");
    }
  }
  throw ConfigError("unknown dataset kind '" + kind + "' (expected idx, csv or synth)");
}

// ---------------------------------------------------------------------------
// Output directory lock

/// Exclusive lock file in an output directory; removed on destruction.
class OutputLock {
 public:
  explicit OutputLock(const std::string& dir) : path_((std::filesystem::path(dir) / ".bayesnas.lock").string()) {
    std::filesystem::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) throw UsageError("output directory '" + dir + "' is locked by another run (" + path_ + ")");
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::write(fd, pid.data(), pid.size()) < 0) {
      ::close(fd);
      throw UsageError("cannot write lock file " + path_);
    }
    ::close(fd);
  }
  ~OutputLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::string path_;
};

}  // namespace bayesnas
