// eagle: generate datasets, train, evaluate checkpoints and sweep alpha/beta.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "eagle/eagle.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct GenerateArgs {
  std::string protocol;
  std::string input;
  std::string out;
  std::uint64_t seed = 0;
  std::int32_t attribute = eagle::kNoAttribute;
  std::size_t feature_dim = 32;
  eagle::EnvSyntheticParams synthetic;
  eagle::FeatureShiftParams shift;
};

int do_generate(GenerateArgs a) {
  using namespace eagle;
  const Protocol p = parse_protocol(a.protocol);
  Dataset out;
  switch (p) {
    case Protocol::EnvSynthetic:
      out = make_env_synthetic_dataset(a.synthetic, a.seed);
      break;
    case Protocol::Attribute: {
      if (a.input.empty()) throw ConfigError("--input is required for protocol attribute");
      if (a.attribute == kNoAttribute) throw ConfigError("--attribute is required for protocol attribute");
      Dataset in = load_dataset(a.input, a.feature_dim, a.seed);
      auto filtered = apply_attribute_filter(in.graph, a.attribute);
      if (!filtered.attribute_found)
        throw ValidationError("attribute " + std::to_string(a.attribute) + " does not occur in " + a.input);
      out.graph = std::move(filtered.train_view);
      out.ood_edges = std::move(filtered.ood_edges);
      out.meta = in.meta;
      out.meta["protocol"] = "attribute";
      out.meta["ood_attribute"] = a.attribute;
      out.meta["seed"] = a.seed;
      break;
    }
    case Protocol::FeatureShift: {
      if (a.input.empty()) throw ConfigError("--input is required for protocol feature-shift");
      Dataset in = load_dataset(a.input, a.feature_dim, a.seed);
      a.shift.seed = a.seed;
      out.graph = gen_feature_shift(in.graph, a.shift);
      out.ood_edges = in.ood_edges;
      out.meta = in.meta;
      out.meta["protocol"] = "feature-shift";
      out.meta["seed"] = a.seed;
      out.meta["p_bar_train"] = a.shift.p_bar_train;
      out.meta["sigma_train"] = a.shift.sigma_train;
      out.meta["p_bar_test"] = a.shift.p_bar_test;
      out.meta["sigma_test"] = a.shift.sigma_test;
      out.meta["test_start"] = a.shift.test_start;
      break;
    }
    case Protocol::Directory:
      throw ConfigError("generate does not support protocol directory");
  }
  write_dataset(a.out, out);
  std::cout << "wrote " << a.out << " (" << out.graph.num_nodes << " nodes, " << out.graph.num_snapshots()
            << " snapshots, " << out.graph.total_edges() << " edges)\n";
  return 0;
}

void print_summary(const eagle::MetricsReport& r) {
  std::cout << "auc_no_ood " << r.auc_no_ood.mean << " +- " << r.auc_no_ood.std << '\n'
            << "auc_ood    " << r.auc_ood.mean << " +- " << r.auc_ood.std << '\n';
  if (r.i_acc) std::cout << "i_acc      " << r.i_acc->mean << " +- " << r.i_acc->std << '\n';
}

int do_train(const std::string& config, const std::string& out) {
  const auto report = eagle::run_experiment_file(config, out);
  print_summary(report);
  std::cout << "report written to " << (std::filesystem::path(out) / "report.json").string() << '\n';
  return 0;
}

int do_eval(const std::string& checkpoint, const std::string& data_dir) {
  using namespace eagle;
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const json meta = json::parse(ckpt.config_json);
  EagleModel model = model_from_checkpoint(ckpt);
  ExperimentConfig cfg;
  if (meta.contains("experiment")) cfg = experiment_config_from_json(meta.at("experiment"));
  const std::uint64_t seed = meta.value("seed", std::uint64_t{0});
  Dataset data = load_dataset(data_dir, cfg.data.feature_dim, cfg.data.seed.value_or(seed));
  if (data.graph.features->dim() != model.input_dim())
    throw ValidationError("dataset feature dimension " + std::to_string(data.graph.features->dim()) +
                          " does not match the checkpoint (" + std::to_string(model.input_dim()) + ")");
  const auto split = chronological_split(data.graph, cfg.split.train, cfg.split.val, cfg.split.test,
                                         cfg.data.seed.value_or(seed));
  const auto* truth = data.invariant_channels ? &*data.invariant_channels : nullptr;
  const EvalResult ev = evaluate(model, data.graph, split, data.ood_edges, truth, cfg.ood_mix);
  json out{{"auc_no_ood", ev.auc_no_ood}, {"auc_ood", ev.auc_ood}, {"i_acc", nullptr}};
  if (ev.i_acc) out["i_acc"] = *ev.i_acc;
  std::cout << out.dump(2) << '\n';
  return 0;
}

int do_sweep(const std::string& config, const std::string& grid, const std::string& out) {
  using namespace eagle;
  const auto cfg = load_experiment_config(config);
  const auto entries = run_sweep(cfg, split_axes(grid), out);
  std::cout << "alpha,beta,auc_no_ood_mean,auc_no_ood_std,auc_ood_mean,auc_ood_std\n";
  for (const auto& e : entries)
    std::cout << e.point.alpha << ',' << e.point.beta << ',' << e.report.auc_no_ood.mean << ','
              << e.report.auc_no_ood.std << ',' << e.report.auc_ood.mean << ',' << e.report.auc_ood.std << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EAGLE: environment-aware OOD link prediction on dynamic graphs"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "write a dataset directory");
  g->add_option("--protocol", gen.protocol, "attribute, feature-shift or env-synthetic")->required();
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--seed", gen.seed, "generator seed");
  g->add_option("--input", gen.input, "source dataset directory (attribute, feature-shift)");
  g->add_option("--attribute", gen.attribute, "edge attribute to withhold (attribute)");
  g->add_option("--feature-dim", gen.feature_dim, "random feature width when the source has none");
  g->add_option("--num-nodes", gen.synthetic.num_nodes);
  g->add_option("--num-snapshots", gen.synthetic.num_snapshots);
  g->add_option("--num-envs", gen.synthetic.num_envs);
  g->add_option("--channel-dim", gen.synthetic.channel_dim);
  g->add_option("--sigma-e", gen.synthetic.sigma_e)->check(CLI::Range(0.0, 1.0));
  g->add_option("--q-bar", gen.synthetic.q_bar)->check(CLI::Range(0.0, 1.0));
  g->add_option("--neighbors", gen.synthetic.neighbors);
  g->add_option("--p-bar-train", gen.shift.p_bar_train)->check(CLI::Range(0.0, 1.0));
  g->add_option("--sigma-train", gen.shift.sigma_train)->check(CLI::Range(0.0, 1.0));
  g->add_option("--p-bar-test", gen.shift.p_bar_test)->check(CLI::Range(0.0, 1.0));
  g->add_option("--sigma-test", gen.shift.sigma_test)->check(CLI::Range(0.0, 1.0));
  g->add_option("--test-start", gen.shift.test_start, "first test snapshot (feature-shift)");

  std::string config, out, checkpoint, data, grid;
  auto* t = app.add_subcommand("train", "run the configured seeds and write report.json");
  t->add_option("--config", config)->required();
  t->add_option("--out", out)->required();

  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a dataset directory");
  e->add_option("--checkpoint", checkpoint)->required();
  e->add_option("--data", data)->required();

  auto* s = app.add_subcommand("sweep", "grid over alpha and/or beta");
  s->add_option("--config", config)->required();
  s->add_option("--grid", grid, "comma list of axes: alpha,beta")->required();
  s->add_option("--out", out, "directory for per-point reports");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kExitConfig;
  }

  try {
    if (*g) return do_generate(gen);
    if (*t) return do_train(config, out);
    if (*e) return do_eval(checkpoint, data);
    if (*s) return do_sweep(config, grid, out);
  } catch (const eagle::ConfigError& ex) {
    std::cerr << "config error: " << ex.what() << '\n';
    return kExitConfig;
  } catch (const eagle::NumericError& ex) {
    std::cerr << "numeric failure: " << ex.what() << '\n';
    return kExitNumeric;
  } catch (const eagle::ValidationError& ex) {
    std::cerr << "data error: " << ex.what() << '\n';
    return kExitData;
  } catch (const eagle::ParseError& ex) {
    std::cerr << "data error: " << ex.what() << '\n';
    return kExitData;
  } catch (const eagle::DimensionError& ex) {
    std::cerr << "data error: " << ex.what() << '\n';
    return kExitData;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 1;
  }
  return 0;
}
