#pragma once

// Experiment plumbing: JSON configuration, dataset directories, multi-seed
// runs with JSON reports and CSV loss curves, checkpoints and the alpha/beta
// sweep.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "eagle/checkpoint.hpp"
#include "eagle/errors.hpp"
#include "eagle/graph.hpp"
#include "eagle/metrics.hpp"
#include "eagle/train.hpp"

namespace eagle {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

enum class Protocol { EnvSynthetic, Attribute, FeatureShift, Directory };

inline std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::EnvSynthetic: return "env-synthetic";
    case Protocol::Attribute: return "attribute";
    case Protocol::FeatureShift: return "feature-shift";
    case Protocol::Directory: return "directory";
  }
  return "?";
}

inline Protocol parse_protocol(const std::string& s) {
  if (s == "env-synthetic") return Protocol::EnvSynthetic;
  if (s == "attribute") return Protocol::Attribute;
  if (s == "feature-shift") return Protocol::FeatureShift;
  if (s == "directory") return Protocol::Directory;
  throw ConfigError("unknown protocol '" + s + "' (expected env-synthetic, attribute, feature-shift or directory)");
}

inline std::string to_string(PartitionRule r) { return r == PartitionRule::Threshold ? "threshold" : "subset"; }
inline PartitionRule parse_partition_rule(const std::string& s) {
  if (s == "threshold") return PartitionRule::Threshold;
  if (s == "subset") return PartitionRule::Subset;
  throw ConfigError("unknown partition_rule '" + s + "' (expected threshold or subset)");
}

inline std::string to_string(AttentionAxis a) { return a == AttentionAxis::Channels ? "channels" : "neighbors"; }
inline AttentionAxis parse_attention_axis(const std::string& s) {
  if (s == "channels") return AttentionAxis::Channels;
  if (s == "neighbors") return AttentionAxis::Neighbors;
  throw ConfigError("unknown attention_axis '" + s + "' (expected channels or neighbors)");
}

struct DataConfig {
  Protocol protocol = Protocol::EnvSynthetic;
  std::string path;                      // dataset directory (all but env-synthetic)
  std::optional<std::uint64_t> seed;     // defaults to the run seed
  std::optional<std::int32_t> shifted_attribute;
  std::size_t feature_dim = 32;          // random features when none are stored
  EnvSyntheticParams synthetic;          // env-synthetic
  FeatureShiftParams shift;              // feature-shift
};

struct SplitConfig {
  std::size_t train = 6, val = 2, test = 2;
};

struct ExperimentConfig {
  std::vector<std::uint64_t> seeds = {0};
  bool no_intervention = false;
  bool ood_mix = true;  // w/ OOD positives are added to the ID positives
  DataConfig data;
  SplitConfig split;
  TrainConfig train;

  /// The training configuration actually used for `seed`.
  TrainConfig train_for(std::uint64_t seed) const {
    TrainConfig t = train;
    t.seed = seed;
    if (no_intervention) t.alpha = 0.0;
    return t;
  }
};

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  std::vector<std::string> unknown;
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) unknown.push_back(it.key());
  if (!unknown.empty()) {
    std::string msg = where + ": unknown key(s):";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }
}

template <class T>
void read_key(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline void check_unit(double x, const char* name) {
  if (!(x >= 0.0 && x <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0,1]");
}

}  // namespace detail

inline json to_json(const TrainConfig& c) {
  return json{{"alpha", c.alpha},
              {"beta", c.beta},
              {"interventions", c.interventions},
              {"intervention_ratio", c.intervention_ratio},
              {"mixing_ratio", c.mixing_ratio},
              {"num_envs", c.num_envs},
              {"hidden", c.hidden},
              {"layers", c.layers},
              {"latent", c.latent},
              {"ecvae_hidden", c.ecvae_hidden},
              {"ecvae_depth", c.ecvae_depth},
              {"ecvae_batch", c.ecvae_batch},
              {"generated_count", c.generated_count},
              {"quantization", c.quantization},
              {"partition_rule", to_string(c.partition_rule)},
              {"attention_axis", to_string(c.attention_axis)},
              {"center_embeddings", c.center_embeddings},
              {"score_scale", c.score_scale},
              {"lr", c.lr},
              {"max_epochs", c.max_epochs},
              {"patience", c.patience},
              {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const json& j) {
  const std::string where = "train";
  detail::reject_unknown(j, {"alpha", "beta", "interventions", "intervention_ratio", "mixing_ratio",
                             "num_envs", "hidden", "layers", "latent", "ecvae_hidden", "ecvae_depth",
                             "ecvae_batch", "generated_count", "quantization", "partition_rule",
                             "attention_axis", "center_embeddings", "score_scale", "lr",
                             "max_epochs", "patience", "seed"},
                         where);
  TrainConfig c;
  detail::read_key(j, "alpha", c.alpha, where);
  detail::read_key(j, "beta", c.beta, where);
  detail::read_key(j, "interventions", c.interventions, where);
  detail::read_key(j, "intervention_ratio", c.intervention_ratio, where);
  detail::read_key(j, "mixing_ratio", c.mixing_ratio, where);
  detail::read_key(j, "num_envs", c.num_envs, where);
  detail::read_key(j, "hidden", c.hidden, where);
  detail::read_key(j, "layers", c.layers, where);
  detail::read_key(j, "latent", c.latent, where);
  detail::read_key(j, "ecvae_hidden", c.ecvae_hidden, where);
  detail::read_key(j, "ecvae_depth", c.ecvae_depth, where);
  detail::read_key(j, "ecvae_batch", c.ecvae_batch, where);
  detail::read_key(j, "generated_count", c.generated_count, where);
  detail::read_key(j, "quantization", c.quantization, where);
  if (j.contains("partition_rule")) c.partition_rule = parse_partition_rule(j.at("partition_rule").get<std::string>());
  if (j.contains("attention_axis")) c.attention_axis = parse_attention_axis(j.at("attention_axis").get<std::string>());
  detail::read_key(j, "center_embeddings", c.center_embeddings, where);
  detail::read_key(j, "score_scale", c.score_scale, where);
  detail::read_key(j, "lr", c.lr, where);
  detail::read_key(j, "max_epochs", c.max_epochs, where);
  detail::read_key(j, "patience", c.patience, where);
  detail::read_key(j, "seed", c.seed, where);
  c.validate();
  return c;
}

inline json to_json(const DataConfig& d) {
  json j{{"protocol", to_string(d.protocol)}, {"feature_dim", d.feature_dim}};
  if (!d.path.empty()) j["path"] = d.path;
  if (d.seed) j["seed"] = *d.seed;
  if (d.shifted_attribute) j["shifted_attribute"] = *d.shifted_attribute;
  if (d.protocol == Protocol::EnvSynthetic) {
    const auto& s = d.synthetic;
    j["num_nodes"] = s.num_nodes;
    j["num_snapshots"] = s.num_snapshots;
    j["num_envs"] = s.num_envs;
    j["channel_dim"] = s.channel_dim;
    j["sigma_e"] = s.sigma_e;
    j["q_bar"] = s.q_bar;
    j["neighbors"] = s.neighbors;
    j["small_noise"] = s.small_noise;
    j["large_noise"] = s.large_noise;
    j["test_start"] = s.test_start;
  }
  if (d.protocol == Protocol::FeatureShift) {
    const auto& f = d.shift;
    j["p_bar_train"] = f.p_bar_train;
    j["sigma_train"] = f.sigma_train;
    j["p_bar_test"] = f.p_bar_test;
    j["sigma_test"] = f.sigma_test;
    j["shift_iters"] = f.iters;
    j["shift_lr"] = f.lr;
  }
  return j;
}

inline DataConfig data_config_from_json(const json& j) {
  const std::string where = "data";
  detail::reject_unknown(j, {"protocol", "path", "seed", "shifted_attribute", "feature_dim",
                             "num_nodes", "num_snapshots", "num_envs", "channel_dim", "sigma_e",
                             "q_bar", "neighbors", "small_noise", "large_noise", "test_start",
                             "p_bar_train", "sigma_train", "p_bar_test", "sigma_test",
                             "shift_iters", "shift_lr"},
                         where);
  DataConfig d;
  if (j.contains("protocol")) d.protocol = parse_protocol(j.at("protocol").get<std::string>());
  detail::read_key(j, "path", d.path, where);
  if (j.contains("seed") && !j.at("seed").is_null()) d.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("shifted_attribute") && !j.at("shifted_attribute").is_null())
    d.shifted_attribute = j.at("shifted_attribute").get<std::int32_t>();
  detail::read_key(j, "feature_dim", d.feature_dim, where);
  auto& s = d.synthetic;
  detail::read_key(j, "num_nodes", s.num_nodes, where);
  detail::read_key(j, "num_snapshots", s.num_snapshots, where);
  detail::read_key(j, "num_envs", s.num_envs, where);
  detail::read_key(j, "channel_dim", s.channel_dim, where);
  detail::read_key(j, "sigma_e", s.sigma_e, where);
  detail::read_key(j, "q_bar", s.q_bar, where);
  detail::read_key(j, "neighbors", s.neighbors, where);
  detail::read_key(j, "small_noise", s.small_noise, where);
  detail::read_key(j, "large_noise", s.large_noise, where);
  detail::read_key(j, "test_start", s.test_start, where);
  auto& f = d.shift;
  detail::read_key(j, "p_bar_train", f.p_bar_train, where);
  detail::read_key(j, "sigma_train", f.sigma_train, where);
  detail::read_key(j, "p_bar_test", f.p_bar_test, where);
  detail::read_key(j, "sigma_test", f.sigma_test, where);
  detail::read_key(j, "shift_iters", f.iters, where);
  detail::read_key(j, "shift_lr", f.lr, where);
  detail::check_unit(s.sigma_e, "data.sigma_e");
  detail::check_unit(s.q_bar, "data.q_bar");
  detail::check_unit(f.p_bar_train, "data.p_bar_train");
  detail::check_unit(f.p_bar_test, "data.p_bar_test");
  detail::check_unit(f.sigma_train, "data.sigma_train");
  detail::check_unit(f.sigma_test, "data.sigma_test");
  if (d.protocol != Protocol::EnvSynthetic && d.path.empty())
    throw ConfigError("data.path is required for protocol " + to_string(d.protocol));
  if (d.protocol == Protocol::Attribute && !d.shifted_attribute)
    throw ConfigError("data.shifted_attribute is required for protocol attribute");
  if (d.feature_dim == 0 || d.feature_dim % 2 != 0) throw ConfigError("data.feature_dim must be a positive even number");
  return d;
}

inline json to_json(const ExperimentConfig& c) {
  return json{{"seeds", c.seeds},
              {"no_intervention", c.no_intervention},
              {"ood_mix", c.ood_mix},
              {"data", to_json(c.data)},
              {"split", json{{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}}},
              {"train", to_json(c.no_intervention ? c.train_for(c.train.seed) : c.train)}};
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
  detail::reject_unknown(j, {"seeds", "no_intervention", "ood_mix", "data", "split", "train"}, "config");
  ExperimentConfig c;
  detail::read_key(j, "seeds", c.seeds, "config");
  if (c.seeds.empty()) throw ConfigError("config.seeds must not be empty");
  detail::read_key(j, "no_intervention", c.no_intervention, "config");
  detail::read_key(j, "ood_mix", c.ood_mix, "config");
  if (j.contains("data")) c.data = data_config_from_json(j.at("data"));
  if (j.contains("split")) {
    const auto& s = j.at("split");
    detail::reject_unknown(s, {"train", "val", "test"}, "split");
    detail::read_key(s, "train", c.split.train, "split");
    detail::read_key(s, "val", c.split.val, "split");
    detail::read_key(s, "test", c.split.test, "split");
  }
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (c.no_intervention) c.train.alpha = 0.0;
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Dataset directories: edges.txt, features.csv, meta.json and, for filtered
// datasets, ood_edges.txt.

struct Dataset {
  DynamicGraph graph;
  std::vector<EdgeList> ood_edges;                      // empty when none
  std::optional<std::vector<std::size_t>> invariant_channels;
  json meta = json::object();
};

inline void write_dataset(const std::string& dir, const Dataset& data) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream out(fs::path(dir) / "edges.txt");
    write_edgelist(out, data.graph);
  }
  if (data.graph.features) {
    std::ofstream out(fs::path(dir) / "features.csv");
    write_features(out, *data.graph.features);
  }
  if (!data.ood_edges.empty()) {
    DynamicGraph ood;
    ood.num_nodes = data.graph.num_nodes;
    ood.snapshots = data.ood_edges;
    std::ofstream out(fs::path(dir) / "ood_edges.txt");
    write_edgelist(out, ood);
  }
  json meta = data.meta;
  meta["num_nodes"] = data.graph.num_nodes;
  meta["num_snapshots"] = data.graph.num_snapshots();
  if (data.graph.features) meta["feature_dim"] = data.graph.features->dim();
  if (data.invariant_channels) meta["invariant_channels"] = *data.invariant_channels;
  std::ofstream out(fs::path(dir) / "meta.json");
  out << meta.dump(2) << '\n';
}

inline Dataset load_dataset(const std::string& dir, std::size_t feature_dim = 32, std::uint64_t seed = 0) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  if (!fs::exists(root / "meta.json")) throw ValidationError("dataset '" + dir + "' has no meta.json");
  Dataset d;
  {
    std::ifstream in(root / "meta.json");
    try {
      in >> d.meta;
    } catch (const json::exception& e) {
      throw ValidationError("dataset '" + dir + "': bad meta.json: " + e.what());
    }
  }
  if (!d.meta.contains("num_nodes") || !d.meta.contains("num_snapshots"))
    throw ValidationError("dataset '" + dir + "': meta.json needs num_nodes and num_snapshots");
  const auto N = d.meta.at("num_nodes").get<std::size_t>();
  const auto T = d.meta.at("num_snapshots").get<std::size_t>();
  d.graph = load_edgelist((root / "edges.txt").string(), N, T);
  if (fs::exists(root / "features.csv"))
    d.graph.features = load_features((root / "features.csv").string(), N, T);
  else
    d.graph.features = random_features(N, T, feature_dim, seed);
  if (fs::exists(root / "ood_edges.txt"))
    d.ood_edges = load_edgelist((root / "ood_edges.txt").string(), N, T).snapshots;
  if (d.meta.contains("invariant_channels"))
    d.invariant_channels = d.meta.at("invariant_channels").get<std::vector<std::size_t>>();
  return d;
}

/// The synthetic dataset with its last channel already withheld.
inline Dataset make_env_synthetic_dataset(EnvSyntheticParams params, std::uint64_t seed) {
  params.seed = seed;
  auto data = gen_env_synthetic(params);
  auto filtered = apply_attribute_filter(data.graph, data.ood_attribute);
  Dataset d;
  d.graph = std::move(filtered.train_view);
  d.ood_edges = std::move(filtered.ood_edges);
  d.invariant_channels = data.invariant_channels;
  d.meta = json{{"protocol", "env-synthetic"},
                {"seed", seed},
                {"num_envs", params.num_envs},
                {"channel_dim", params.channel_dim},
                {"sigma_e", params.sigma_e},
                {"q_bar", params.q_bar},
                {"neighbors", params.neighbors},
                {"small_noise", params.small_noise},
                {"large_noise", params.large_noise},
                {"test_start", params.resolved_test_start()},
                {"ood_attribute", data.ood_attribute}};
  return d;
}

/// Loads or generates the data of one run according to `cfg.data`.
inline Dataset prepare_dataset(const ExperimentConfig& cfg, std::uint64_t run_seed) {
  const std::uint64_t seed = cfg.data.seed.value_or(run_seed);
  const auto& dc = cfg.data;
  if (dc.protocol == Protocol::EnvSynthetic) return make_env_synthetic_dataset(dc.synthetic, seed);
  Dataset d = load_dataset(dc.path, dc.feature_dim, seed);
  if (dc.shifted_attribute) {
    auto filtered = apply_attribute_filter(d.graph, *dc.shifted_attribute);
    d.graph = std::move(filtered.train_view);
    if (d.ood_edges.empty()) {
      d.ood_edges = std::move(filtered.ood_edges);
    } else {
      for (std::size_t t = 0; t < d.ood_edges.size(); ++t)
        d.ood_edges[t].insert(d.ood_edges[t].end(), filtered.ood_edges[t].begin(), filtered.ood_edges[t].end());
    }
  }
  if (dc.protocol == Protocol::FeatureShift) {
    FeatureShiftParams p = dc.shift;
    p.seed = seed;
    p.test_start = cfg.split.train + cfg.split.val;
    d.graph = gen_feature_shift(d.graph, p);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Reports

struct RunResult {
  std::uint64_t seed = 0;
  double auc_no_ood = 0.0;
  double auc_ood = 0.0;
  std::optional<double> i_acc;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  double best_val_auc = 0.0;
  friend bool operator==(const RunResult&, const RunResult&) = default;
};

struct MetricsReport {
  json config;
  std::vector<std::uint64_t> seeds;
  std::vector<RunResult> runs;
  MeanStd auc_no_ood;
  MeanStd auc_ood;
  std::optional<MeanStd> i_acc;
  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline json to_json(const MeanStd& m) { return json{{"mean", m.mean}, {"std", m.std}}; }
inline MeanStd mean_std_from_json(const json& j) { return {j.at("mean").get<double>(), j.at("std").get<double>()}; }

inline json to_json(const MetricsReport& r) {
  json runs = json::array();
  for (const auto& x : r.runs)
    runs.push_back(json{{"seed", x.seed},
                        {"auc_no_ood", x.auc_no_ood},
                        {"auc_ood", x.auc_ood},
                        {"i_acc", x.i_acc ? json(*x.i_acc) : json(nullptr)},
                        {"best_epoch", x.best_epoch},
                        {"epochs_run", x.epochs_run},
                        {"best_val_auc", x.best_val_auc}});
  return json{{"config", r.config},
              {"seeds", r.seeds},
              {"runs", runs},
              {"auc_no_ood", to_json(r.auc_no_ood)},
              {"auc_ood", to_json(r.auc_ood)},
              {"i_acc", r.i_acc ? to_json(*r.i_acc) : json(nullptr)}};
}

inline MetricsReport metrics_report_from_json(const json& j) {
  MetricsReport r;
  r.config = j.at("config");
  r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  for (const auto& x : j.at("runs")) {
    RunResult run;
    run.seed = x.at("seed").get<std::uint64_t>();
    run.auc_no_ood = x.at("auc_no_ood").get<double>();
    run.auc_ood = x.at("auc_ood").get<double>();
    if (!x.at("i_acc").is_null()) run.i_acc = x.at("i_acc").get<double>();
    run.best_epoch = x.at("best_epoch").get<std::size_t>();
    run.epochs_run = x.at("epochs_run").get<std::size_t>();
    run.best_val_auc = x.at("best_val_auc").get<double>();
    r.runs.push_back(run);
  }
  r.auc_no_ood = mean_std_from_json(j.at("auc_no_ood"));
  r.auc_ood = mean_std_from_json(j.at("auc_ood"));
  if (!j.at("i_acc").is_null()) r.i_acc = mean_std_from_json(j.at("i_acc"));
  return r;
}

inline MetricsReport aggregate(json config, const std::vector<RunResult>& runs) {
  if (runs.empty()) throw ValidationError("aggregate: no runs");
  MetricsReport r;
  r.config = std::move(config);
  r.runs = runs;
  std::vector<double> a, b, c;
  for (const auto& x : runs) {
    r.seeds.push_back(x.seed);
    a.push_back(x.auc_no_ood);
    b.push_back(x.auc_ood);
    if (x.i_acc) c.push_back(*x.i_acc);
  }
  r.auc_no_ood = mean_std(a);
  r.auc_ood = mean_std(b);
  if (c.size() == runs.size()) r.i_acc = mean_std(c);
  return r;
}

inline void write_curves_csv(std::ostream& out, const std::vector<LossReport>& history) {
  out << "epoch,l_task,l_risk,l_ecvae,total,val_auc\n" << std::setprecision(17);
  for (const auto& h : history)
    out << h.epoch << ',' << h.l_task << ',' << h.l_risk << ',' << h.l_ecvae << ',' << h.total << ','
        << h.val_auc << '\n';
}

// ---------------------------------------------------------------------------
// Checkpoints of trained models

inline Checkpoint make_checkpoint(const EagleModel& model, const AdamState& adam, const json& extra) {
  Checkpoint ckpt;
  json cfg = extra;
  cfg["train"] = to_json(model.config());
  cfg["input_dim"] = model.input_dim();
  cfg["label_times"] = model.label_times();
  ckpt.config_json = cfg.dump();
  const auto params = model.parameters();
  const auto names = model.parameter_names();
  for (std::size_t i = 0; i < params.size(); ++i)
    ckpt.arrays.push_back(CheckpointArray{names[i], params[i].shape(), params[i].to_vector()});
  ckpt.adam = adam;
  return ckpt;
}

/// Rebuilds the model described by a checkpoint and loads its arrays.
inline EagleModel model_from_checkpoint(const Checkpoint& ckpt) {
  const json cfg = json::parse(ckpt.config_json);
  EagleModel model(train_config_from_json(cfg.at("train")), cfg.at("input_dim").get<std::size_t>(),
                   cfg.at("label_times").get<std::size_t>());
  auto params = model.parameters();
  const auto names = model.parameter_names();
  if (params.size() != ckpt.arrays.size())
    throw ValidationError("checkpoint has " + std::to_string(ckpt.arrays.size()) + " arrays, model expects " +
                          std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& a = ckpt.arrays[i];
    if (a.name != names[i] || a.shape != params[i].shape())
      throw ValidationError("checkpoint array " + a.name + " " + shape_str(a.shape) + " does not match " +
                            names[i] + " " + shape_str(params[i].shape()));
    std::copy(a.values.begin(), a.values.end(), params[i].mutable_data().begin());
  }
  return model;
}

// ---------------------------------------------------------------------------
// Runs

struct SeedRun {
  RunResult result;
  FitResult fit;
  Checkpoint checkpoint;
};

inline SeedRun run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  const Dataset data = prepare_dataset(cfg, seed);
  const std::uint64_t data_seed = cfg.data.seed.value_or(seed);
  const SplitSpec split = chronological_split(data.graph, cfg.split.train, cfg.split.val, cfg.split.test, data_seed);
  EagleModel model(cfg.train_for(seed), data.graph.features->dim(), split.train.size());
  TrainState state(model);
  SeedRun out;
  out.fit = fit(model, data.graph, split, state);
  const auto* truth = data.invariant_channels ? &*data.invariant_channels : nullptr;
  const EvalResult ev = evaluate(model, data.graph, split, data.ood_edges, truth, cfg.ood_mix);
  out.result.seed = seed;
  out.result.auc_no_ood = ev.auc_no_ood;
  out.result.auc_ood = ev.auc_ood;
  out.result.i_acc = ev.i_acc;
  out.result.best_epoch = out.fit.best_epoch;
  out.result.epochs_run = out.fit.epochs_run;
  out.result.best_val_auc = out.fit.best_val_auc;
  out.checkpoint = make_checkpoint(model, state.optimizer.state(),
                                   json{{"experiment", to_json(cfg)}, {"seed", seed}});
  return out;
}

/// Runs every configured seed. With a nonempty `out_dir` writes
/// report.json, curves_seed<S>.csv and model_seed<S>.ckpt there.
inline MetricsReport run_experiment(const ExperimentConfig& cfg, const std::string& out_dir = "") {
  namespace fs = std::filesystem;
  if (!out_dir.empty()) fs::create_directories(out_dir);
  std::vector<RunResult> runs;
  for (auto seed : cfg.seeds) {
    const SeedRun r = run_seed(cfg, seed);
    runs.push_back(r.result);
    if (!out_dir.empty()) {
      std::ofstream curves(fs::path(out_dir) / ("curves_seed" + std::to_string(seed) + ".csv"));
      write_curves_csv(curves, r.fit.history);
      save_checkpoint((fs::path(out_dir) / ("model_seed" + std::to_string(seed) + ".ckpt")).string(), r.checkpoint);
    }
  }
  MetricsReport report = aggregate(to_json(cfg), runs);
  if (!out_dir.empty()) {
    std::ofstream out(fs::path(out_dir) / "report.json");
    out << to_json(report).dump(2) << '\n';
  }
  return report;
}

inline MetricsReport run_experiment_file(const std::string& config_path, const std::string& out_dir = "") {
  return run_experiment(load_experiment_config(config_path), out_dir);
}

// ---------------------------------------------------------------------------
// Sweep

inline const std::vector<double>& alpha_grid() {
  static const std::vector<double> g = {1e-3, 1e-2, 1e-1, 1e0, 1e1};
  return g;
}

inline const std::vector<double>& beta_grid() {
  static const std::vector<double> g = {1e-6, 1e-5, 1e-4, 1e-3, 1e-2};
  return g;
}

struct SweepPoint {
  double alpha = 0.0;
  double beta = 0.0;
  friend bool operator==(const SweepPoint&, const SweepPoint&) = default;
};

/// Grid over the named axes ("alpha", "beta"); an axis not named keeps the
/// configured value.
inline std::vector<SweepPoint> sweep_grid(const std::vector<std::string>& axes, const TrainConfig& base) {
  bool use_alpha = false, use_beta = false;
  for (const auto& a : axes) {
    if (a == "alpha") use_alpha = true;
    else if (a == "beta") use_beta = true;
    else throw ConfigError("unknown sweep axis '" + a + "' (expected alpha or beta)");
  }
  const std::vector<double> alphas = use_alpha ? alpha_grid() : std::vector<double>{base.alpha};
  const std::vector<double> betas = use_beta ? beta_grid() : std::vector<double>{base.beta};
  std::vector<SweepPoint> out;
  for (double a : alphas)
    for (double b : betas) out.push_back({a, b});
  return out;
}

inline std::vector<std::string> split_axes(const std::string& spec) {
  std::vector<std::string> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  if (out.empty()) throw ConfigError("empty sweep grid specification");
  return out;
}

struct SweepEntry {
  SweepPoint point;
  MetricsReport report;
};

inline std::vector<SweepEntry> run_sweep(const ExperimentConfig& cfg, const std::vector<std::string>& axes,
                                         const std::string& out_dir = "") {
  std::vector<SweepEntry> out;
  for (const auto& p : sweep_grid(axes, cfg.train)) {
    ExperimentConfig c = cfg;
    c.train.alpha = p.alpha;
    c.train.beta = p.beta;
    if (c.no_intervention) c.train.alpha = 0.0;
    std::ostringstream name;
    name << "alpha_" << p.alpha << "_beta_" << p.beta;
    const std::string sub = out_dir.empty() ? "" : (std::filesystem::path(out_dir) / name.str()).string();
    out.push_back({p, run_experiment(c, sub)});
  }
  if (!out_dir.empty()) {
    json j = json::array();
    for (const auto& e : out)
      j.push_back(json{{"alpha", e.point.alpha},
                       {"beta", e.point.beta},
                       {"auc_no_ood", to_json(e.report.auc_no_ood)},
                       {"auc_ood", to_json(e.report.auc_ood)}});
    std::ofstream f(std::filesystem::path(out_dir) / "sweep.json");
    f << j.dump(2) << '\n';
  }
  return out;
}

}  // namespace eagle
