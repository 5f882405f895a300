#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "bayesnas/error.hpp"
#include "bayesnas/eval/baselines.hpp"
#include "bayesnas/eval/report.hpp"
#include "bayesnas/io/artifacts.hpp"
#include "bayesnas/io/config.hpp"
#include "bayesnas/io/pipeline.hpp"
#include "bayesnas/search/search.hpp"
#include "bayesnas/searchspace/selection_json.hpp"
#include "json.hpp"

using namespace bayesnas;
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

RunConfig config_or_default(const std::string& path) {
  if (!path.empty()) return load_run_config(path);
  RunConfig c;
  finalize_run_config(c);
  return c;
}

void print_warnings(const std::vector<std::string>& ws) {
  for (const auto& w : ws) std::cerr << nlohmann::json{{"warning", w}}.dump() << "\n";
}

int cmd_vae_train(const std::string& config, const std::string& out) {
  const RunConfig c = load_run_config(config);
  OutputLock lock(c.output_dir);
  const RunData data = load_run_data(c);
  const VaeTrainResult r = vae_train(data.split.val, c.vae);
  const std::string path = out.empty() ? (fs::path(c.output_dir) / "vae.ckpt").string() : out;
  save_vae(r.model, path);
  std::cout << nlohmann::json{{"vae", path}, {"final_loss", r.final_loss}}.dump() << "\n";
  return 0;
}

int cmd_search(const std::string& config, const std::string& vae_path) {
  const RunConfig c = load_run_config(config);
  OutputLock lock(c.output_dir);
  const RunData data = load_run_data(c);
  const Vae vae = load_vae(vae_path);
  if (vae.input_shape() != data.split.input_shape) {
    throw DataError("VAE input shape " + shape_str(vae.input_shape()) + " differs from dataset shape " +
                    shape_str(data.split.input_shape));
  }
  const BackboneSpec backbone = backbone_by_name(c.backbone);
  SearchState st(backbone, default_candidates(backbone), c.search);
  const fs::path dir(c.output_dir);
  const fs::path traj = dir / "trajectory.jsonl";
  std::ofstream tout(traj, std::ios::binary);
  if (!tout) throw DataError("cannot write '" + traj.string() + "'");
  const SearchResult res = run_search(st, data.split, vae, [&](const std::string& line) { tout << line << "\n"; });
  tout.close();
  print_warnings(res.warnings);
  const nlohmann::json sel = selection_to_json(st.backbone, st.space, res.selection);
  write_text(dir / "selection.json", sel.dump(2) + "\n");
  save_search(st, res.selection, (dir / "search.ckpt").string());
  std::cout << nlohmann::json{{"selection", (dir / "selection.json").string()},
                              {"trajectory", traj.string()},
                              {"checkpoint", (dir / "search.ckpt").string()}}
                   .dump()
            << "\n";
  return 0;
}

ModelInfo model_info(const RunConfig& c, const Dataset& train, double dropout_p, const std::string& tag) {
  ModelInfo info;
  info.backbone = c.backbone;
  info.input_shape = train.input_shape;
  info.num_classes = train.num_classes;
  info.prior_sigma = c.search.prior_sigma;
  info.dropout_p = dropout_p;
  info.normalization = train.normalization;
  info.dataset_tag = train.tag;
  info.model_tag = tag;
  return info;
}

int cmd_retrain(const std::string& config, const std::string& selection, const std::string& out) {
  const RunConfig c = load_run_config(config);
  OutputLock lock(c.output_dir);
  const RunData data = load_run_data(c);
  const BackboneSpec backbone = backbone_by_name(c.backbone);
  const CandidateSpace space = default_candidates(backbone);
  nlohmann::json doc = nlohmann::json::parse(read_text(selection), nullptr, false);
  if (doc.is_discarded()) throw DataError("selection '" + selection + "' is not valid JSON");
  const ArchitectureSelection sel = selection_from_json(doc, backbone, space);
  const TrainedModel m = retrain(backbone, space, sel, data.split.train, c.search);
  const std::string path = out.empty() ? (fs::path(c.output_dir) / "model.ckpt").string() : out;
  save_model(m, backbone, space, model_info(c, data.split.train, 0.0, "nas"), c.seed, path);
  std::cout << nlohmann::json{{"model", path}, {"epoch_loss", m.epoch_loss}}.dump() << "\n";
  return 0;
}

struct EvalArgs {
  std::string model, dataset, ood, ood_dataset, config, vae, out, csv, label_column;
  std::size_t mc_samples = 0;
  std::size_t latency_runs = 0;
  double beta = 1.0;
};

void emit_metrics(const MetricsRecord& m, const std::string& out, const std::string& csv) {
  const nlohmann::json j = to_json(m);
  if (!out.empty()) write_text(out, j.dump(2) + "\n");
  if (!csv.empty()) write_text(csv, metrics_csv_header() + metrics_csv_row(m));
  std::cout << j.dump() << "\n";
}

int cmd_eval(const EvalArgs& a) {
  const RunConfig c = config_or_default(a.config);
  LoadedModel lm = load_model(a.model);
  const Normalization* norm = lm.info.normalization.empty() ? nullptr : &lm.info.normalization;
  Dataset test = load_dataset_spec(a.dataset, a.label_column, norm);
  test.validate();
  if (test.input_shape != lm.info.input_shape) {
    throw DataError("dataset inputs " + shape_str(test.input_shape) + " do not match the model's " +
                    shape_str(lm.info.input_shape));
  }
  if (test.num_classes > lm.info.num_classes) {
    throw DataError("dataset has " + std::to_string(test.num_classes) + " classes, the model " +
                    std::to_string(lm.info.num_classes));
  }
  std::optional<Tensor> ood;
  if (!a.ood_dataset.empty()) {
    Dataset o = load_dataset_spec(a.ood_dataset, a.label_column, norm);
    if (o.input_shape != test.input_shape) throw DataError("OOD dataset inputs differ in shape from the test set");
    ood = o.all_features();
  } else if (!a.ood.empty()) {
    std::optional<Vae> vae;
    if (!a.vae.empty()) vae = load_vae(a.vae);
    ood = make_ood_inputs(a.ood, test, vae ? &*vae : nullptr, a.beta, c.seed);
  }
  Predictor p{lm.info.model_tag, {}};
  p.members.push_back(std::move(lm.model));
  EvalOptions eo = c.eval;
  if (a.mc_samples) eo.mc_samples = a.mc_samples;
  if (a.latency_runs) eo.latency_runs = a.latency_runs;
  MetricsRecord m = evaluate_predictor(p, test, ood ? &*ood : nullptr, eo);
  emit_metrics(m, a.out, a.csv);
  return 0;
}

std::optional<Vae> vae_for(const RunConfig& c, const std::string& vae_path) {
  if (c.ood != "vae") return std::nullopt;
  if (vae_path.empty()) throw ConfigError("ood 'vae' needs --vae");
  return load_vae(vae_path);
}

int cmd_baseline(const std::string& config, const std::string& kind_name, const std::string& vae_path) {
  const RunConfig c = load_run_config(config);
  const BaselineKind kind = parse_baseline_kind(kind_name);
  OutputLock lock(c.output_dir);
  const RunData data = load_run_data(c);
  const auto vae = vae_for(c, vae_path);
  const BackboneSpec backbone = backbone_by_name(c.backbone);
  const CandidateSpace space = default_candidates(backbone);
  const Predictor p = train_baseline(kind, backbone, space, data.split.train, c.baseline);
  const Tensor ood = make_ood_inputs(c.ood, data.test, vae ? &*vae : nullptr, c.search.beta, c.seed);
  const MetricsRecord m = evaluate_predictor(p, data.test, &ood, c.eval);
  const fs::path stem = fs::path(c.output_dir) / ("metrics_" + p.tag + "_seed" + std::to_string(c.seed));
  emit_metrics(m, stem.string() + ".json", "");
  if (p.members.size() == 1) {
    const double dropout = kind == BaselineKind::mcdropout ? c.baseline.dropout_p : 0.0;
    save_model(p.members[0], backbone, space, model_info(c, data.split.train, dropout, p.tag), c.seed,
               (fs::path(c.output_dir) / ("baseline_" + p.tag + ".ckpt")).string());
  }
  return 0;
}

int cmd_sweep(const std::string& config, const std::string& backbone_name, const std::string& vae_path) {
  RunConfig c = load_run_config(config);
  if (!backbone_name.empty()) c.backbone = backbone_name;
  const BackboneSpec backbone = backbone_by_name(c.backbone);
  OutputLock lock(c.output_dir);
  const RunData data = load_run_data(c);
  const auto vae = vae_for(c, vae_path);
  const Tensor ood = make_ood_inputs(c.ood, data.test, vae ? &*vae : nullptr, c.search.beta, c.seed);
  const auto rs = n_last_sweep(backbone, default_candidates(backbone), data.split.train, data.test, ood, c.baseline,
                               c.eval);
  const std::string csv = sweep_csv(rs);
  write_text(fs::path(c.output_dir) / ("sweep_nlast_" + backbone.name + ".csv"), csv);
  std::cout << csv;
  return 0;
}

int cmd_report(const std::string& dir, const std::string& out) {
  const auto records = load_metrics_dir(dir);
  if (records.empty()) throw DataError("no metrics records under '" + dir + "'");
  const Report r = make_report(records);
  const fs::path target = out.empty() ? fs::path(dir) : fs::path(out);
  OutputLock lock(target.string());
  write_text(target / "report.csv", r.csv);
  write_text(target / "report.md", r.markdown);
  std::cout << r.markdown;
  return 0;
}

int fail(std::string_view kind, const std::string& message, int code) {
  std::string m = message;
  for (char& ch : m)
    if (ch == '\n' || ch == '\r') ch = ' ';
  std::cerr << nlohmann::json{{"error", kind}, {"message", m}, {"exit_code", code}}.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian neural architecture search with OOD-aware uncertainty"};
  app.require_subcommand(1);

  std::string config, vae, out, selection, kind, backbone, dir;
  EvalArgs ea;

  auto* vt = app.add_subcommand("vae-train", "train the OOD generator");
  vt->add_option("--config", config, "run config JSON")->required();
  vt->add_option("--out", out, "checkpoint path (default OUTPUT_DIR/vae.ckpt)");

  auto* se = app.add_subcommand("search", "run the architecture search");
  se->add_option("--config", config, "run config JSON")->required();
  se->add_option("--vae", vae, "VAE checkpoint")->required();

  auto* rt = app.add_subcommand("retrain", "train a selected architecture from scratch");
  rt->add_option("--config", config, "run config JSON")->required();
  rt->add_option("--selection", selection, "selection JSON")->required();
  rt->add_option("--out", out, "checkpoint path (default OUTPUT_DIR/model.ckpt)");

  auto* ev = app.add_subcommand("eval", "evaluate a trained model");
  ev->add_option("--model", ea.model, "model checkpoint")->required();
  ev->add_option("--dataset", ea.dataset, "dataset spec")->required();
  auto* ood_kind = ev->add_option("--ood", ea.ood, "OOD inputs: rotate[:DEG], white_noise, gaussian_corrupt[:LEVEL], vae");
  auto* ood_ds = ev->add_option("--ood-dataset", ea.ood_dataset, "dataset spec used as OOD inputs");
  ood_kind->excludes(ood_ds);
  ev->add_option("--mc-samples", ea.mc_samples, "Monte-Carlo samples")->check(CLI::PositiveNumber);
  ev->add_option("--config", ea.config, "run config JSON (seed, eval options)");
  ev->add_option("--vae", ea.vae, "VAE checkpoint for --ood vae");
  ev->add_option("--beta", ea.beta, "latent shift for --ood vae")->check(CLI::NonNegativeNumber);
  ev->add_option("--latency-runs", ea.latency_runs, "timed prediction runs (0 skips timing)");
  ev->add_option("--label-column", ea.label_column, "CSV label column");
  ev->add_option("--out", ea.out, "metrics JSON path");
  ev->add_option("--csv", ea.csv, "metrics CSV path");

  auto* bl = app.add_subcommand("baseline", "train and evaluate a baseline");
  bl->add_option("--config", config, "run config JSON")->required();
  bl->add_option("--kind", kind, "nonbayes, lrt, mcdropout or ensemble")->required();
  bl->add_option("--vae", vae, "VAE checkpoint when ood is 'vae'");

  auto* sw = app.add_subcommand("sweep-nlast", "cost and quality with the last n layers Bayesian");
  sw->add_option("--config", config, "run config JSON")->required();
  sw->add_option("--backbone", backbone, "backbone (overrides the config)");
  sw->add_option("--vae", vae, "VAE checkpoint when ood is 'vae'");

  auto* rp = app.add_subcommand("report", "aggregate metrics files into comparison tables");
  rp->add_option("--dir", dir, "directory with metrics JSON files")->required();
  rp->add_option("--out", out, "output directory (default: --dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("config_error", e.what(), 2);
  }

  try {
    if (vt->parsed()) return cmd_vae_train(config, out);
    if (se->parsed()) return cmd_search(config, vae);
    if (rt->parsed()) return cmd_retrain(config, selection, out);
    if (ev->parsed()) return cmd_eval(ea);
    if (bl->parsed()) return cmd_baseline(config, kind, vae);
    if (sw->parsed()) return cmd_sweep(config, backbone, vae);
    if (rp->parsed()) return cmd_report(dir, out);
  } catch (const Error& e) {
    return fail(e.kind_name(), e.what(), e.exit_code());
  } catch (const nlohmann::json::exception& e) {
    return fail("data_error", e.what(), 3);
  } catch (const fs::filesystem_error& e) {
    return fail("data_error", e.what(), 3);
  } catch (const std::exception& e) {
    return fail("error", e.what(), 1);
  }
  return 1;
}
