#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "bayesnas/eval/metrics.hpp"
#include "bayesnas/io/artifacts.hpp"
#include "bayesnas/io/checkpoint.hpp"
#include "bayesnas/io/config.hpp"
#include "bayesnas/io/csv.hpp"
#include "bayesnas/io/idx.hpp"
#include "bayesnas/io/synth.hpp"

using namespace bayesnas;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("bayesnas_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter_++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  static inline int counter_ = 0;
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream(path) << text;
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& b) {
  std::ofstream o(path, std::ios::binary);
  o.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

void be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

// 4 images of 2x3 pixels with hand-picked bytes.
const std::vector<unsigned char> kPixels = {0,  255, 128, 1,  2,   3,   10, 20, 30, 40, 50, 60,
                                            70, 80,  90,  99, 100, 101, 7,  0,  255, 8,  9,  4};
const std::vector<unsigned char> kLabels = {3, 0, 9, 1};

std::vector<unsigned char> idx_images() {
  std::vector<unsigned char> b;
  be32(b, 0x803);
  be32(b, 4);
  be32(b, 2);
  be32(b, 3);
  b.insert(b.end(), kPixels.begin(), kPixels.end());
  return b;
}

std::vector<unsigned char> idx_labels() {
  std::vector<unsigned char> b;
  be32(b, 0x801);
  be32(b, 4);
  b.insert(b.end(), kLabels.begin(), kLabels.end());
  return b;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Synth, DeterministicAndBalanced) {
  Dataset a = synth_dataset(SynthKind::gaussians, 100, 5);
  Dataset b = synth_dataset(SynthKind::gaussians, 100, 5);
  Dataset c = synth_dataset(SynthKind::gaussians, 100, 6);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.features, c.features);
  int ones = 0;
  for (int l : a.labels) ones += l;
  EXPECT_EQ(ones, 50);
  EXPECT_EQ(a.input_shape, (Shape{2}));
  EXPECT_EQ(a.num_classes, 2u);
  Dataset m = synth_dataset(SynthKind::moons, 64, 1);
  EXPECT_EQ(m.size(), 64u);
  EXPECT_THROW(synth_dataset(SynthKind::gaussians, 0, 1), ConfigError);
  EXPECT_THROW(parse_synth_kind("spirals"), ConfigError);
}

TEST(Synth, ClassMeansSitAtHalfSeparation) {
  Dataset d = synth_dataset(SynthKind::gaussians, 20000, 2);
  double m0 = 0, m1 = 0;
  for (std::size_t i = 0; i < d.size(); ++i) (d.labels[i] ? m1 : m0) += d.features[i * 2];
  EXPECT_NEAR(m0 / 10000, -2.0, 0.05);
  EXPECT_NEAR(m1 / 10000, 2.0, 0.05);
}

TEST(Synth, WideSeparationIsLearnedByDeterministicMlp) {
  SynthOptions o;
  o.separation = 6.0;
  Dataset train = synth_dataset(SynthKind::gaussians, 1000, 3, o);
  Dataset test = synth_dataset(SynthKind::gaussians, 1000, 4, o);
  const BackboneSpec b = mlp_backbone();
  const CandidateSpace space = default_candidates(b);
  TrainOptions t;
  t.epochs = 10;
  t.lr = 1e-2;
  t.batch_size = 32;
  t.seed = 1;
  auto m = train_selection(b, space, fixed_selection(space, 1.0, ActivationKind::relu, 3, 0), train, t);
  Rng rng(1);
  const Tensor probs = predict_mc(m.net.network, test.all_features(), 1, rng);
  EXPECT_GE(accuracy(probs, test.labels), 0.99);
}

TEST(Idx, FixtureRoundTripsBitExactly) {
  TempDir dir;
  write_bytes(dir.file("img"), idx_images());
  write_bytes(dir.file("lbl"), idx_labels());
  Dataset d = load_idx(dir.file("img"), dir.file("lbl"));
  EXPECT_EQ(d.size(), 4u);
  EXPECT_EQ(d.input_shape, (Shape{1, 2, 3}));
  EXPECT_EQ(d.kind, FeatureKind::image);
  EXPECT_EQ(d.num_classes, 10u);
  for (std::size_t i = 0; i < kPixels.size(); ++i) EXPECT_EQ(d.features[i], kPixels[i] / 255.0);
  EXPECT_EQ(d.labels, (std::vector<int>{3, 0, 9, 1}));

  write_idx(d, dir.file("img2"), dir.file("lbl2"));
  std::ifstream a(dir.file("img2"), std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  EXPECT_EQ(bytes, idx_images());
  Dataset e = load_idx(dir.file("img2"), dir.file("lbl2"));
  EXPECT_EQ(e.features, d.features);
  EXPECT_EQ(e.labels, d.labels);
}

TEST(Idx, ReadsGzip) {
  TempDir dir;
  for (auto [name, bytes] : {std::pair{"img.gz", idx_images()}, std::pair{"lbl.gz", idx_labels()}}) {
    gzFile f = gzopen(dir.file(name).c_str(), "wb");
    gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(f);
  }
  Dataset d = load_idx(dir.file("img.gz"), dir.file("lbl.gz"));
  EXPECT_EQ(d.size(), 4u);
  EXPECT_EQ(d.features[1], 1.0);
}

TEST(Idx, DistinctDiagnostics) {
  TempDir dir;
  write_bytes(dir.file("lbl"), idx_labels());
  write_bytes(dir.file("empty"), {});
  EXPECT_NE(error_of([&] { load_idx(dir.file("empty"), dir.file("lbl")); }).find("IDX truncated"), std::string::npos);

  auto bad = idx_images();
  bad[3] = 0x04;
  write_bytes(dir.file("bad"), bad);
  EXPECT_NE(error_of([&] { load_idx(dir.file("bad"), dir.file("lbl")); }).find("IDX bad magic"), std::string::npos);

  auto cut = idx_images();
  cut.resize(cut.size() - 5);
  write_bytes(dir.file("cut"), cut);
  EXPECT_NE(error_of([&] { load_idx(dir.file("cut"), dir.file("lbl")); }).find("IDX truncated"), std::string::npos);

  auto three = idx_labels();
  three[7] = 3;
  three.pop_back();
  write_bytes(dir.file("img"), idx_images());
  write_bytes(dir.file("lbl3"), three);
  EXPECT_NE(error_of([&] { load_idx(dir.file("img"), dir.file("lbl3")); }).find("IDX count mismatch"),
            std::string::npos);
  EXPECT_THROW(load_idx(dir.file("missing"), dir.file("lbl")), DataError);
}

TEST(Csv, ShapeLabelsAndNormalization) {
  TempDir dir;
  write_text(dir.file("d.csv"), "a,b,c,target\n1,2,5,0\n3,2,7,1\n5,2,9,1\n");
  Dataset d = load_csv(dir.file("d.csv"));
  EXPECT_EQ(d.size(), 3u);
  EXPECT_EQ(d.input_shape, (Shape{3}));
  EXPECT_EQ(d.labels, (std::vector<int>{0, 1, 1}));
  EXPECT_EQ(d.num_classes, 2u);
  // column b is constant: zero after normalization thanks to the std floor
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(d.features[i * 3 + 1], 0.0);
  EXPECT_EQ(d.normalization.stddev[1], kStdFloor);
  // population std of {1,3,5}
  EXPECT_NEAR(d.normalization.stddev[0], std::sqrt(8.0 / 3.0), 1e-12);
  EXPECT_NEAR(d.features[0], -std::sqrt(1.5), 1e-12);
}

TEST(Csv, NormalizationInvertsExactly) {
  TempDir dir;
  std::string text = "x,y,label\n";
  Rng rng(4);
  std::vector<double> raw;
  for (int i = 0; i < 50; ++i) {
    const double x = rng.normal() * 3 + 1, y = rng.uniform(-10, 10);
    raw.push_back(x);
    raw.push_back(y);
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%d\n", x, y, i % 3);
    text += buf;
  }
  write_text(dir.file("r.csv"), text);
  Dataset d = load_csv(dir.file("r.csv"), "label");
  EXPECT_EQ(d.num_classes, 3u);
  for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_NEAR(d.normalization.invert(i % 2, d.features[i]), raw[i], 1e-12);

  auto j = normalization_json(d.normalization);
  Normalization back = normalization_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.mean, d.normalization.mean);
  EXPECT_EQ(back.stddev, d.normalization.stddev);

  Dataset fixed = load_csv(dir.file("r.csv"), "label", &back);
  EXPECT_EQ(fixed.features, d.features);
}

TEST(Csv, LabelColumnByName) {
  TempDir dir;
  write_text(dir.file("d.csv"), "y,a\n1,10\n0,20\n");
  Dataset d = load_csv(dir.file("d.csv"), "y");
  EXPECT_EQ(d.labels, (std::vector<int>{1, 0}));
  EXPECT_EQ(d.input_shape, (Shape{1}));
  EXPECT_THROW(load_csv(dir.file("d.csv"), "nope"), DataError);
}

TEST(Csv, ParseErrorsAreAddressed) {
  TempDir dir;
  write_text(dir.file("bad.csv"), "a,b,label\n1,2,0\n3,x,1\n");
  const std::string msg = error_of([&] { load_csv(dir.file("bad.csv")); });
  EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("column 2"), std::string::npos) << msg;
  write_text(dir.file("ragged.csv"), "a,b,label\n1,2\n");
  EXPECT_THROW(load_csv(dir.file("ragged.csv")), DataError);
  write_text(dir.file("frac.csv"), "a,label\n1,0.5\n");
  EXPECT_THROW(load_csv(dir.file("frac.csv")), DataError);
  write_text(dir.file("empty.csv"), "");
  EXPECT_THROW(load_csv(dir.file("empty.csv")), DataError);
}

TEST(Dataset, StratifiedSplitIsDisjointAndBalanced) {
  Dataset d = synth_dataset(SynthKind::gaussians, 1000, 1);
  auto [tr, va] = stratified_split(d, 0.8, 3);
  EXPECT_EQ(tr.size(), 800u);
  EXPECT_EQ(va.size(), 200u);
  std::vector<int> seen(1000, 0);
  for (auto i : tr) ++seen[i];
  for (auto i : va) ++seen[i];
  for (int s : seen) EXPECT_EQ(s, 1);
  int ones = 0;
  for (auto i : va) ones += d.labels[i];
  EXPECT_EQ(ones, 100);
}

TEST(Checkpoint, ParametersAndOptimizerRoundTripBitExactly) {
  TempDir dir;
  Rng rng(5);
  Checkpoint ck;
  ck.kind = "search";
  ck.seed = 0xFFFFFFFFFFFFFFF1ULL;
  ParamGroup g;
  g["w"] = {Shape{2, 3}, {1.0 / 3.0, -0.0, 1e-300, -7.5, std::nextafter(1.0, 2.0), 42.0}};
  g["b"] = {Shape{1}, {rng.normal()}};
  ck.groups["candidates"] = g;
  AdamMoments mo{{0.1, 0.2}, {0.3, 0.4}, 17};
  ck.optimizers["theta"] = {1e-4, 0.9, 0.999, 1e-8, {{"w", mo}}};
  ck.selection = {{"layers", nlohmann::json::array()}};
  ck.metadata = {{"epoch", 3}};
  save_checkpoint(ck, dir.file("s.ckpt"));
  Checkpoint back = load_checkpoint(dir.file("s.ckpt"));
  EXPECT_EQ(back.seed, ck.seed);
  EXPECT_EQ(back.kind, "search");
  EXPECT_EQ(back.groups, ck.groups);
  ASSERT_EQ(back.optimizers.count("theta"), 1u);
  const auto& st = back.optimizers["theta"].state.at("w");
  EXPECT_EQ(st.m, mo.m);
  EXPECT_EQ(st.v, mo.v);
  EXPECT_EQ(st.step, 17u);
  EXPECT_EQ(back.metadata["epoch"], 3);
  EXPECT_TRUE(std::signbit(back.groups["candidates"]["w"].values[1]));
}

TEST(Checkpoint, VersionIsChecked) {
  TempDir dir;
  Checkpoint ck;
  ck.kind = "model";
  save_checkpoint(ck, dir.file("m.ckpt"));
  std::ifstream in(dir.file("m.ckpt"));
  auto j = nlohmann::json::parse(in);
  j["format_version"] = kCheckpointVersion + 1;
  write_text(dir.file("m.ckpt"), j.dump());
  EXPECT_NE(error_of([&] { load_checkpoint(dir.file("m.ckpt")); }).find("format version"), std::string::npos);
  EXPECT_THROW(load_checkpoint(dir.file("none.ckpt")), DataError);
}

TEST(Checkpoint, TruncatedBlobIsRejected) {
  TempDir dir;
  Checkpoint ck;
  ck.kind = "model";
  ck.groups["model"]["w"] = {Shape{4}, {1, 2, 3, 4}};
  save_checkpoint(ck, dir.file("m.ckpt"));
  fs::resize_file(dir.file("m.ckpt.bin"), 16);
  EXPECT_THROW(load_checkpoint(dir.file("m.ckpt")), DataError);
}

TEST(Checkpoint, VaeRoundTrip) {
  TempDir dir;
  Dataset d = synth_dataset(SynthKind::gaussians, 64, 1);
  VaeOptions o;
  o.hidden = 8;
  o.latent = 2;
  o.epochs = 2;
  o.lr = 1e-3;
  o.seed = 9;
  auto res = vae_train(d, o);
  save_vae(res.model, dir.file("vae.ckpt"));
  Vae back = load_vae(dir.file("vae.ckpt"));
  EXPECT_TRUE(back.trained());
  EXPECT_EQ(back.data_lo(), res.model.data_lo());
  EXPECT_EQ(back.latent(), 2u);
  const auto a = res.model.parameters(), b = back.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].tensor.values(), b[i].tensor.values()) << a[i].name;
  Tensor x = d.batch(std::vector<std::size_t>{0, 1});
  Rng r1(1), r2(1);
  EXPECT_EQ(generate_ood(res.model, x, 1.0, r1).values(), generate_ood(back, x, 1.0, r2).values());
}

TEST(Checkpoint, ModelRoundTrip) {
  TempDir dir;
  Dataset d = synth_dataset(SynthKind::gaussians, 64, 1);
  const BackboneSpec b = mlp_backbone();
  const CandidateSpace space = default_candidates(b);
  TrainOptions t;
  t.epochs = 2;
  t.seed = 3;
  auto m = train_selection(b, space, fixed_selection(space, 0.5, ActivationKind::elu, 3, 2), d, t);
  ModelInfo info;
  info.backbone = b.name;
  info.input_shape = d.input_shape;
  info.num_classes = 2;
  info.dataset_tag = "toy";
  save_model(m, b, space, info, 3, dir.file("m.ckpt"));
  LoadedModel back = load_model(dir.file("m.ckpt"));
  EXPECT_EQ(back.model.selection, m.selection);
  EXPECT_EQ(back.info.dataset_tag, "toy");
  EXPECT_EQ(back.seed, 3u);
  const auto pa = m.net.network.parameters(), pb = back.model.net.network.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].tensor.values(), pb[i].tensor.values());
  Tensor x = d.all_features();
  Rng r1(2), r2(2);
  EXPECT_EQ(predict_mc(m.net.network, x, 5, r1).values(), predict_mc(back.model.net.network, x, 5, r2).values());
}

TEST(Config, DefaultsAndOverrides) {
  auto j = nlohmann::json::parse(R"({"seed": 4, "backbone": "lenet5", "dataset": "synth:gaussians:100:1",
    "search": {"alpha": 0.5, "epochs": 7, "noise": {"warmup_epochs": 2}}, "vae": {"variant": "conv"}})");
  RunConfig c = parse_run_config(j);
  ::unsetenv("BAYESNAS_SEED");
  finalize_run_config(c);
  EXPECT_EQ(c.seed, 4u);
  EXPECT_EQ(c.search.seed, 4u);
  EXPECT_EQ(c.search.alpha, 0.5);
  EXPECT_EQ(c.search.gamma, 0.01);
  EXPECT_EQ(c.search.epochs, 7);
  EXPECT_EQ(c.search.noise.warmup_epochs, 2);
  EXPECT_EQ(c.vae.variant, VaeVariant::conv);
  EXPECT_EQ(c.eval.mc_samples, 10u);

  ::setenv("BAYESNAS_SEED", "99", 1);
  RunConfig e = parse_run_config(j);
  finalize_run_config(e);
  EXPECT_EQ(e.seed, 99u);
  EXPECT_EQ(e.vae.seed, 99u);
  ::setenv("BAYESNAS_SEED", "x1", 1);
  RunConfig f = parse_run_config(j);
  EXPECT_THROW(finalize_run_config(f), ConfigError);
  ::unsetenv("BAYESNAS_SEED");
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(parse_run_config(nlohmann::json::parse(R"({"sed": 1})")), ConfigError);
  EXPECT_THROW(parse_run_config(nlohmann::json::parse(R"({"search": {"alpah": 1}})")), ConfigError);
  EXPECT_THROW(parse_run_config(nlohmann::json::parse(R"({"search": {"noise": {"x": 1}}})")), ConfigError);
  EXPECT_THROW(parse_run_config(nlohmann::json::parse(R"({"seed": "one"})")), ConfigError);
  for (const char* bad : {R"({"search": {"alpha": -1}})", R"({"search": {"lr_t": 0}})", R"({"backbone": "vgg"})",
                          R"({"ood": "fog"})", R"({"search": {"mc_samples_search": 1}})"}) {
    RunConfig c = parse_run_config(nlohmann::json::parse(bad));
    EXPECT_THROW(finalize_run_config(c), ConfigError) << bad;
  }
}

TEST(Config, DatasetSpecs) {
  TempDir dir;
  Dataset s = load_dataset_spec("synth:gaussians:40:2:6");
  EXPECT_EQ(s.size(), 40u);
  write_text(dir.file("t.csv"), "a,b\n1,0\n2,1\n");
  EXPECT_EQ(load_dataset_spec("csv:" + dir.file("t.csv")).size(), 2u);
  write_text(dir.file("u.csv"), "lab,a\n1,0\n0,1\n");
  EXPECT_EQ(load_dataset_spec("csv:" + dir.file("u.csv") + ":lab").labels, (std::vector<int>{1, 0}));
  write_bytes(dir.file("img"), idx_images());
  write_bytes(dir.file("lbl"), idx_labels());
  EXPECT_EQ(load_dataset_spec("idx:" + dir.file("img") + "," + dir.file("lbl")).size(), 4u);
  EXPECT_THROW(load_dataset_spec("parquet:x"), ConfigError);
  EXPECT_THROW(load_dataset_spec("nocolon"), ConfigError);
  EXPECT_THROW(load_dataset_spec("synth:gaussians:abc:1"), ConfigError);
  EXPECT_THROW(load_dataset_spec("idx:onlyone"), ConfigError);
}

TEST(Config, OutputLockIsExclusive) {
  TempDir dir;
  {
    OutputLock a(dir.file("out"));
    EXPECT_THROW(OutputLock b(dir.file("out")), UsageError);
  }
  OutputLock c(dir.file("out"));
  SUCCEED();
}
