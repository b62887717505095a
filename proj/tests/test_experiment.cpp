#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_util.hpp"

using namespace eagle;
namespace fs = std::filesystem;

namespace {

json tiny_json(std::vector<std::uint64_t> seeds = {7}) {
  json j = json::parse(R"({
    "data": {"protocol": "env-synthetic", "num_nodes": 30, "num_snapshots": 6, "num_envs": 3,
             "channel_dim": 4, "neighbors": 2, "test_start": 5},
    "split": {"train": 4, "val": 1, "test": 1},
    "train": {"num_envs": 3, "hidden": 4, "layers": 1, "latent": 3, "ecvae_hidden": 8,
              "ecvae_depth": 1, "ecvae_batch": 64, "interventions": 2,
              "attention_axis": "neighbors", "max_epochs": 3, "patience": 3}
  })");
  j["seeds"] = seeds;
  return j;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("eagle_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

// Configuration

TEST(Config, DefaultsAndEnumsRoundTrip) {
  const auto c = experiment_config_from_json(json::object());
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{0}));
  EXPECT_EQ(c.split.train, 6u);
  EXPECT_EQ(c.split.val, 2u);
  EXPECT_EQ(c.split.test, 2u);
  EXPECT_EQ(c.train.max_epochs, 1000u);
  const auto back = experiment_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  TrainConfig t;
  t.partition_rule = PartitionRule::Subset;
  t.attention_axis = AttentionAxis::Neighbors;
  const auto t2 = train_config_from_json(to_json(t));
  EXPECT_EQ(t2.partition_rule, PartitionRule::Subset);
  EXPECT_EQ(t2.attention_axis, AttentionAxis::Neighbors);
}

TEST(Config, UnknownKeysListed) {
  try {
    experiment_config_from_json(json{{"seeds", {1}}, {"bogus", 1}, {"also_bogus", 2}});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("bogus"), std::string::npos);
    EXPECT_NE(msg.find("also_bogus"), std::string::npos);
  }
  EXPECT_THROW(experiment_config_from_json(json{{"train", {{"alpah", 1}}}}), ConfigError);
  EXPECT_THROW(experiment_config_from_json(json{{"data", {{"sigma", 1}}}}), ConfigError);
}

TEST(Config, RangeAndTypeChecks) {
  EXPECT_THROW(experiment_config_from_json(json{{"data", {{"sigma_e", 1.5}}}}), ConfigError);
  EXPECT_THROW(experiment_config_from_json(json{{"data", {{"q_bar", -0.1}}}}), ConfigError);
  EXPECT_THROW(experiment_config_from_json(json{{"data", {{"p_bar_test", 2.0}}}}), ConfigError);
  EXPECT_THROW(experiment_config_from_json(json{{"train", {{"alpha", -1}}}}), ConfigError);
  EXPECT_THROW(experiment_config_from_json(json{{"train", {{"alpha", "high"}}}}), ConfigError);
  EXPECT_THROW(experiment_config_from_json(json{{"train", {{"partition_rule", "median"}}}}), ConfigError);
  EXPECT_THROW(experiment_config_from_json(json{{"data", {{"protocol", "attribute"}}}}), ConfigError);
  EXPECT_THROW(experiment_config_from_json(json{{"seeds", json::array()}}), ConfigError);
}

TEST(Config, NoInterventionForcesAlphaZeroAndIsEchoed) {
  auto j = tiny_json();
  j["no_intervention"] = true;
  j["train"]["alpha"] = 0.5;
  const auto c = experiment_config_from_json(j);
  EXPECT_EQ(c.train.alpha, 0.0);
  EXPECT_EQ(c.train_for(3).alpha, 0.0);
  EXPECT_EQ(c.train_for(3).seed, 3u);
  const auto echo = to_json(c);
  EXPECT_EQ(echo.at("no_intervention"), true);
  EXPECT_EQ(echo.at("train").at("alpha"), 0.0);
}

TEST(Config, LoadFromFileErrors) {
  const auto dir = scratch("config_file");
  EXPECT_THROW(load_experiment_config((dir / "missing.json").string()), ConfigError);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(load_experiment_config((dir / "bad.json").string()), ConfigError);
}

// Reports

TEST(Report, JsonRoundTrip) {
  MetricsReport r = aggregate(json{{"k", 1}}, {RunResult{1, 0.71, 0.65, 0.8, 3, 4, 0.7},
                                                RunResult{2, 0.73, 0.61, std::nullopt, 5, 9, 0.72}});
  EXPECT_FALSE(r.i_acc.has_value());  // one run lacks ground truth
  EXPECT_EQ(metrics_report_from_json(json::parse(to_json(r).dump())), r);
  r.runs[1].i_acc = 0.6;
  r = aggregate(r.config, r.runs);
  ASSERT_TRUE(r.i_acc.has_value());
  EXPECT_EQ(metrics_report_from_json(json::parse(to_json(r).dump())), r);
}

TEST(Report, PropertyRoundTripOnRandomReports) {
  Rng rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<RunResult> runs;
    for (std::size_t i = 0, n = 1 + rng.uniform_int(6); i < n; ++i)
      runs.push_back(RunResult{rng.next(), rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform_int(100),
                               rng.uniform_int(100), rng.uniform()});
    const auto r = aggregate(json{{"trial", trial}}, runs);
    EXPECT_EQ(metrics_report_from_json(json::parse(to_json(r).dump())), r);
  }
}

TEST(Report, EqualRunsHaveZeroStd) {
  const auto r = aggregate(json::object(), std::vector<RunResult>(4, RunResult{0, 0.7, 0.6, 0.5, 1, 2, 0.7}));
  EXPECT_EQ(r.auc_no_ood.std, 0.0);
  EXPECT_EQ(r.auc_ood.std, 0.0);
  EXPECT_EQ(r.i_acc->std, 0.0);
}

// Checkpoints

TEST(Checkpoint, RoundTripIsExact) {
  EagleModel m(train_config_from_json(tiny_json()["train"]), 8, 4);
  Adam opt(m.parameters());
  for (auto& p : m.parameters()) backward(sum(square(p)));
  opt.step();
  const auto ckpt = make_checkpoint(m, opt.state(), json{{"seed", 3}});
  std::stringstream buf;
  write_checkpoint(buf, ckpt);
  const auto back = read_checkpoint(buf);
  EXPECT_EQ(back.config_json, ckpt.config_json);
  ASSERT_EQ(back.arrays.size(), ckpt.arrays.size());
  for (std::size_t i = 0; i < back.arrays.size(); ++i) {
    EXPECT_EQ(back.arrays[i].name, ckpt.arrays[i].name);
    EXPECT_EQ(back.arrays[i].shape, ckpt.arrays[i].shape);
    EXPECT_TRUE(eagle::testing::bit_equal(back.arrays[i].values, ckpt.arrays[i].values));
    EXPECT_TRUE(eagle::testing::bit_equal(back.adam.m[i], ckpt.adam.m[i]));
    EXPECT_TRUE(eagle::testing::bit_equal(back.adam.v[i], ckpt.adam.v[i]));
  }
  EXPECT_EQ(back.adam.t, 1);
  const auto rebuilt = model_from_checkpoint(back);
  const auto a = m.parameters(), b = rebuilt.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(eagle::testing::bit_equal(a[i].data(), b[i].data()));
}

TEST(Checkpoint, LayoutStartsWithMagicAndVersion) {
  EagleModel m(train_config_from_json(tiny_json()["train"]), 8, 4);
  Adam opt(m.parameters());
  std::stringstream buf;
  write_checkpoint(buf, make_checkpoint(m, opt.state(), json::object()));
  const std::string bytes = buf.str();
  EXPECT_EQ(bytes.substr(0, 8), "EAGLECKP");
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1);
  EXPECT_EQ(bytes[9] | bytes[10] | bytes[11], 0);
}

TEST(Checkpoint, CorruptionDetected) {
  EagleModel m(train_config_from_json(tiny_json()["train"]), 8, 4);
  Adam opt(m.parameters());
  std::stringstream buf;
  write_checkpoint(buf, make_checkpoint(m, opt.state(), json::object()));
  const std::string good = buf.str();

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  std::stringstream s1(bad_magic);
  EXPECT_THROW(read_checkpoint(s1), ValidationError);

  std::string bad_config = good;
  bad_config[8 + 4 + 8 + 8 + 2] ^= 1;  // a byte inside the config JSON
  std::stringstream s2(bad_config);
  EXPECT_THROW(read_checkpoint(s2), ValidationError);

  std::stringstream s3(good.substr(0, good.size() - 5));
  EXPECT_THROW(read_checkpoint(s3), ValidationError);
}

TEST(Checkpoint, ShapeMismatchRejected) {
  EagleModel m(train_config_from_json(tiny_json()["train"]), 8, 4);
  Adam opt(m.parameters());
  auto ckpt = make_checkpoint(m, opt.state(), json::object());
  ckpt.arrays[0].shape = {1, 1, 1};
  EXPECT_THROW(model_from_checkpoint(ckpt), ValidationError);
}

// Datasets

TEST(Dataset, DirectoryRoundTrip) {
  EnvSyntheticParams p;
  p.num_nodes = 20;
  p.num_snapshots = 5;
  const auto d = make_env_synthetic_dataset(p, 4);
  const auto dir = scratch("dataset");
  write_dataset(dir.string(), d);
  EXPECT_TRUE(fs::exists(dir / "edges.txt"));
  EXPECT_TRUE(fs::exists(dir / "features.csv"));
  EXPECT_TRUE(fs::exists(dir / "ood_edges.txt"));
  const auto back = load_dataset(dir.string());
  EXPECT_EQ(*back.graph.features, *d.graph.features);
  EXPECT_EQ(back.graph.snapshots, d.graph.snapshots);
  EXPECT_EQ(back.ood_edges, d.ood_edges);
  EXPECT_EQ(back.invariant_channels, d.invariant_channels);
  EXPECT_EQ(back.meta.at("seed"), 4);
  EXPECT_EQ(back.meta.at("ood_attribute"), 4);
}

TEST(Dataset, MissingFeaturesAreSeededNormals) {
  const auto dir = scratch("nofeatures");
  std::ofstream(dir / "edges.txt") << "0 0 1\n1 1 2\n";
  std::ofstream(dir / "meta.json") << R"({"num_nodes": 3, "num_snapshots": 2})";
  const auto a = load_dataset(dir.string(), 32, 5);
  EXPECT_EQ(a.graph.features->dim(), 32u);
  EXPECT_EQ(*a.graph.features, random_features(3, 2, 32, 5));
}

TEST(Dataset, MissingMetaIsADataError) {
  const auto dir = scratch("nometa");
  EXPECT_THROW(load_dataset(dir.string()), ValidationError);
}

TEST(Dataset, AttributeProtocolFiltersDirectory) {
  const auto dir = scratch("attr");
  std::ofstream(dir / "edges.txt") << "0 0 1 0\n0 1 2 1\n1 0 2 1\n1 2 3 0\n";
  std::ofstream(dir / "meta.json") << R"({"num_nodes": 4, "num_snapshots": 2})";
  ExperimentConfig c;
  c.data.protocol = Protocol::Attribute;
  c.data.path = dir.string();
  c.data.shifted_attribute = 1;
  c.data.feature_dim = 4;
  const auto d = prepare_dataset(c, 0);
  EXPECT_EQ(d.graph.total_edges(), 2u);
  EXPECT_EQ(d.ood_edges[0].size() + d.ood_edges[1].size(), 2u);
}

// Runs

TEST(RunExperiment, FixedSeedGivesByteIdenticalReports) {
  const auto cfg = experiment_config_from_json(tiny_json({7}));
  const auto a = scratch("det_a"), b = scratch("det_b");
  run_experiment(cfg, a.string());
  run_experiment(cfg, b.string());
  const auto ra = read_file(a / "report.json");
  EXPECT_FALSE(ra.empty());
  EXPECT_EQ(ra, read_file(b / "report.json"));
  EXPECT_EQ(read_file(a / "curves_seed7.csv"), read_file(b / "curves_seed7.csv"));
  EXPECT_EQ(read_file(a / "model_seed7.ckpt"), read_file(b / "model_seed7.ckpt"));
}

TEST(RunExperiment, OneEntryPerSeedPlusAggregate) {
  const auto cfg = experiment_config_from_json(tiny_json({1, 2, 3, 4, 5}));
  const auto dir = scratch("five");
  const auto r = run_experiment(cfg, dir.string());
  EXPECT_EQ(r.runs.size(), 5u);
  EXPECT_EQ(r.seeds, (std::vector<std::uint64_t>{1, 2, 3, 4, 5}));
  ASSERT_TRUE(r.i_acc.has_value());
  const auto j = json::parse(read_file(dir / "report.json"));
  EXPECT_EQ(j.at("runs").size(), 5u);
  for (const char* key : {"auc_no_ood", "auc_ood", "i_acc", "seeds", "config"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(metrics_report_from_json(j), r);
  std::ifstream curves(dir / "curves_seed3.csv");
  std::string header;
  std::getline(curves, header);
  EXPECT_EQ(header, "epoch,l_task,l_risk,l_ecvae,total,val_auc");
}

TEST(RunExperiment, CheckpointReproducesEvaluation) {
  const auto cfg = experiment_config_from_json(tiny_json({2}));
  const auto run = run_seed(cfg, 2);
  const auto model = model_from_checkpoint(run.checkpoint);
  const auto data = prepare_dataset(cfg, 2);
  const auto split = chronological_split(data.graph, 4, 1, 1, 2);
  const auto ev = evaluate(model, data.graph, split, data.ood_edges, &*data.invariant_channels);
  EXPECT_EQ(ev.auc_no_ood, run.result.auc_no_ood);
  EXPECT_EQ(ev.auc_ood, run.result.auc_ood);
  EXPECT_EQ(ev.i_acc, run.result.i_acc);
}

// Sweep

TEST(Sweep, FullGridIsTwentyFivePoints) {
  const auto g = sweep_grid({"alpha", "beta"}, TrainConfig{});
  ASSERT_EQ(g.size(), 25u);
  const std::vector<double> alphas = {1e-3, 1e-2, 1e-1, 1.0, 10.0};
  const std::vector<double> betas = {1e-6, 1e-5, 1e-4, 1e-3, 1e-2};
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(g[i * 5 + j], (SweepPoint{alphas[i], betas[j]}));
}

TEST(Sweep, SingleAxisKeepsOtherValue) {
  TrainConfig c;
  c.beta = 0.5;
  const auto g = sweep_grid(split_axes("alpha"), c);
  ASSERT_EQ(g.size(), 5u);
  for (const auto& p : g) EXPECT_EQ(p.beta, 0.5);
}

TEST(Sweep, UnknownAxisRejected) {
  EXPECT_THROW(sweep_grid({"gamma"}, TrainConfig{}), ConfigError);
  EXPECT_THROW(split_axes(","), ConfigError);
}
