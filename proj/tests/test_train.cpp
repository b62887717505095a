#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace eagle;
using eagle::testing::bit_equal;
using eagle::testing::grad_check;

namespace {

TrainConfig tiny_config(std::uint64_t seed = 0) {
  TrainConfig c;
  c.num_envs = 3;
  c.hidden = 4;
  c.layers = 1;
  c.latent = 3;
  c.ecvae_hidden = 8;
  c.ecvae_depth = 1;
  c.ecvae_batch = 64;
  c.interventions = 2;
  c.attention_axis = AttentionAxis::Neighbors;
  c.max_epochs = 5;
  c.patience = 5;
  c.seed = seed;
  return c;
}

struct Toy {
  Dataset data;
  SplitSpec split;
};

Toy toy(std::uint64_t seed = 1) {
  EnvSyntheticParams p;
  p.num_nodes = 30;
  p.num_snapshots = 6;
  p.num_envs = 3;
  p.channel_dim = 4;
  p.neighbors = 2;
  p.test_start = 5;
  Toy t;
  t.data = make_env_synthetic_dataset(p, seed);
  t.split = chronological_split(t.data.graph, 4, 1, 1, seed);
  return t;
}

std::vector<InvariantPartition> uniform_partitions(std::size_t N, std::size_t K, std::vector<std::size_t> inv) {
  InvariantPartition p;
  for (std::size_t k = 0; k < K; ++k)
    (std::find(inv.begin(), inv.end(), k) != inv.end() ? p.invariant : p.variant).push_back(k);
  return std::vector<InvariantPartition>(N, p);
}

EnvSampleLibrary random_library(std::size_t d, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  EnvSampleLibrary lib;
  lib.observed = EnvSampleSet(d);
  lib.generated = EnvSampleSet(d);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> a(d), b(d);
    for (auto& x : a) x = rng.normal();
    for (auto& x : b) x = rng.normal() + 10.0;
    lib.observed.push(a, 0, 0);
    lib.generated.push(b, 0, 0);
  }
  return lib;
}

bool library_contains(const EnvSampleLibrary& lib, std::span<const double> s) {
  for (const auto* set : {&lib.observed, &lib.generated})
    for (std::size_t i = 0; i < set->size(); ++i)
      if (bit_equal(set->sample(i), s)) return true;
  return false;
}

}  // namespace

// Prediction

TEST(PredictLinks, OrthogonalRepresentationsScoreHalf) {
  // node 0 lives on channel 0, node 1 on channel 1
  const auto z = Tensor::from({2, 1, 2, 2}, {1, 2, 0, 0, 0, 0, 3, 4});
  const auto s = predict_links(z, 0, {{0, 1}});
  EXPECT_DOUBLE_EQ(s[0], 0.5);
}

TEST(PredictLinks, AllInvariantMaskIsNoOp) {
  Rng rng(1);
  const auto z = Tensor::uniform({4, 2, 3, 2}, -1, 1, rng);
  const auto parts = uniform_partitions(4, 3, {0, 1, 2});
  const EdgeList pairs = {{0, 1}, {1, 3}, {2, 3}};
  EXPECT_EQ(predict_links(z, 1, pairs), predict_links(z, 1, pairs, &parts));
}

TEST(PredictLinks, MaskingDropsExactlyOneChannel) {
  const auto z = Tensor::from({2, 1, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  PairBatch b;
  b.add({0, 1}, 0, 1.0);
  const double full = pair_logits(z, b).item();
  EXPECT_DOUBLE_EQ(full, 1 * 5 + 2 * 6 + 3 * 7 + 4 * 8);
  auto parts = uniform_partitions(2, 2, {0});
  EXPECT_DOUBLE_EQ(pair_logits(z, b, &parts).item(), 1 * 5 + 2 * 6);
  parts = uniform_partitions(2, 2, {1});
  EXPECT_DOUBLE_EQ(pair_logits(z, b, &parts).item(), 3 * 7 + 4 * 8);
}

TEST(ScoringView, CentersAndScales) {
  Rng rng(2);
  const auto z = Tensor::uniform({5, 2, 2, 3}, -1, 1, rng);
  TrainConfig c;
  c.score_scale = 4.0;
  const auto v = scoring_view(z, c);
  const auto means = mean(v, 0).to_vector();
  for (double m : means) EXPECT_NEAR(m, 0.0, 1e-14);
  const auto zm = mean(z, 0).to_vector();
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(v[i], 2.0 * (z[i] - zm[i % zm.size()]), 1e-14);
  c.center_embeddings = false;
  c.score_scale = 1.0;
  EXPECT_EQ(scoring_view(z, c).to_vector(), z.to_vector());
}

// Task loss

TEST(TaskLoss, ZeroRepresentationsGiveLogTwo) {
  PairBatch b;
  b.add({0, 1}, 0, 1.0);
  b.add({1, 2}, 0, 0.0);
  EXPECT_NEAR(task_loss(Tensor::zeros({3, 1, 2, 2}), b).item(), std::log(2.0), 1e-15);
}

TEST(TaskLoss, ConfidentCorrectScoresNearZero) {
  // nodes 0 and 1 aligned, node 2 opposite
  const auto z = Tensor::from({3, 1, 1, 1}, {10, 10, -10});
  PairBatch b;
  b.add({0, 1}, 0, 1.0);
  b.add({0, 2}, 0, 0.0);
  EXPECT_LT(task_loss(z, b).item(), 1e-40);
}

TEST(TaskLoss, GradientCheckMaskedAndUnmasked) {
  Rng rng(3);
  auto z = Tensor::uniform({5, 2, 3, 2}, -1, 1, rng, true);
  PairBatch b;
  b.add({0, 1}, 0, 1.0);
  b.add({2, 4}, 1, 0.0);
  b.add({1, 3}, 1, 1.0);
  const auto parts = uniform_partitions(5, 3, {0, 2});
  EXPECT_LT(grad_check({z}, [&] { return task_loss(z, b); }).worst_relative, 1e-4);
  EXPECT_LT(grad_check({z}, [&] { return task_loss(z, b, &parts); }).worst_relative, 1e-4);
}

TEST(TrainingPairs, PositivesFromNextSnapshotScoredAtCurrent) {
  const auto t = toy();
  const auto pairs = build_training_pairs(t.data.graph, t.split.train, 5);
  std::size_t expected_pos = 0;
  for (std::size_t s = 1; s < 4; ++s) expected_pos += t.data.graph.snapshots[s].size();
  std::size_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_LT(pairs.t[i], 3u);
    const auto next = t.data.graph.edge_set(pairs.t[i] + 1);
    const bool is_edge = next.count(edge_key(pairs.u[i], pairs.v[i])) > 0;
    EXPECT_EQ(is_edge, pairs.labels[i] == 1.0);
    (pairs.labels[i] == 1.0 ? pos : neg) += 1;
  }
  EXPECT_EQ(pos, expected_pos);
  EXPECT_EQ(neg, expected_pos);
}

TEST(TrainingPairs, ShortRangeRejected) {
  const auto t = toy();
  EXPECT_THROW(build_training_pairs(t.data.graph, SnapshotRange{0, 1}, 0), ValidationError);
}

// Intervention

TEST(Intervene, ZeroRatioIsIdentity) {
  Rng rng(4);
  const auto z = Tensor::uniform({6, 2, 3, 2}, -1, 1, rng);
  const auto lib = random_library(2, 5, 4);
  const auto r = intervene(z, uniform_partitions(6, 3, {0}), lib, 0.0, 0.5, rng);
  EXPECT_EQ(r.replaced_slices, 0u);
  EXPECT_TRUE(bit_equal(r.z.data(), z.data()));
}

TEST(Intervene, NoVariantChannelsIsIdentity) {
  Rng rng(5);
  const auto z = Tensor::uniform({6, 2, 3, 2}, -1, 1, rng);
  const auto lib = random_library(2, 5, 5);
  const auto r = intervene(z, uniform_partitions(6, 3, {0, 1, 2}), lib, 1.0, 0.5, rng);
  EXPECT_EQ(r.replaced_slices, 0u);
  EXPECT_TRUE(bit_equal(r.z.data(), z.data()));
}

TEST(Intervene, FullRatioReplacesVariantWithLibraryMembers) {
  Rng rng(6);
  const std::size_t N = 7, T = 3, K = 2, d = 3;
  const auto z = Tensor::uniform({N, T, K, d}, -1, 1, rng);
  const auto lib = random_library(d, 11, 6);
  const auto r = intervene(z, uniform_partitions(N, K, {0}), lib, 1.0, 0.5, rng);
  EXPECT_EQ(r.replaced_slices, N * T);
  EXPECT_EQ(r.nodes.size(), N);
  bool saw_observed = false, saw_generated = false;
  for (std::size_t v = 0; v < N; ++v)
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t inv = ((v * T + t) * K + 0) * d, var = ((v * T + t) * K + 1) * d;
      EXPECT_TRUE(bit_equal(r.z.data().subspan(inv, d), z.data().subspan(inv, d)));
      const auto slice = r.z.data().subspan(var, d);
      EXPECT_TRUE(library_contains(lib, slice));
      (slice[0] > 5.0 ? saw_generated : saw_observed) = true;
    }
  EXPECT_TRUE(saw_observed);
  EXPECT_TRUE(saw_generated);
}

TEST(Intervene, MixingRatioSelectsPool) {
  Rng rng(7);
  const auto z = Tensor::uniform({5, 2, 2, 2}, -1, 1, rng);
  const auto lib = random_library(2, 4, 7);
  const auto only_observed = intervene(z, uniform_partitions(5, 2, {0}), lib, 1.0, 1.0, rng);
  const auto only_generated = intervene(z, uniform_partitions(5, 2, {0}), lib, 1.0, 0.0, rng);
  for (std::size_t v = 0; v < 5; ++v)
    for (std::size_t t = 0; t < 2; ++t) {
      const std::size_t off = ((v * 2 + t) * 2 + 1) * 2;
      EXPECT_LT(only_observed.z[off], 5.0);
      EXPECT_GT(only_generated.z[off], 5.0);
    }
}

TEST(Intervene, PropertyInvariantChannelsBitIdentical) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t N = 3 + rng.uniform_int(6), T = 1 + rng.uniform_int(3), K = 2 + rng.uniform_int(3), d = 2;
    const auto z = Tensor::uniform({N, T, K, d}, -1, 1, rng);
    std::vector<InvariantPartition> parts;
    for (std::size_t v = 0; v < N; ++v) {
      InvariantPartition p;
      for (std::size_t k = 0; k < K; ++k) (rng.bernoulli(0.5) ? p.invariant : p.variant).push_back(k);
      parts.push_back(p);
    }
    const auto r = intervene(z, parts, random_library(d, 6, trial), rng.uniform(), 0.5, rng);
    for (std::size_t v = 0; v < N; ++v)
      for (auto k : parts[v].invariant)
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t off = ((v * T + t) * K + k) * d;
          EXPECT_TRUE(bit_equal(r.z.data().subspan(off, d), z.data().subspan(off, d)));
        }
  }
}

TEST(Intervene, EmptyLibraryRejected) {
  Rng rng(9);
  const auto z = Tensor::zeros({2, 1, 2, 1});
  EXPECT_THROW(intervene(z, uniform_partitions(2, 2, {0}), EnvSampleLibrary{}, 1.0, 0.5, rng), ValidationError);
}

TEST(Intervene, ReplacedSlicesCarryNoGradient) {
  Rng rng(10);
  auto z = Tensor::uniform({4, 2, 2, 2}, -1, 1, rng, true);
  const auto lib = random_library(2, 5, 10);
  const auto r = intervene(z, uniform_partitions(4, 2, {0}), lib, 1.0, 0.5, rng);
  backward(sum(square(r.z)));
  for (std::size_t v = 0; v < 4; ++v)
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(z.grad()[((v * 2 + t) * 2 + 1) * 2 + i], 0.0);
        EXPECT_NE(z.grad()[((v * 2 + t) * 2 + 0) * 2 + i], 0.0);
      }
}

// Risk

TEST(RiskLoss, PopulationVarianceOfLosses) {
  EXPECT_DOUBLE_EQ(variance(stack({Tensor::scalar(1.0), Tensor::scalar(3.0)})).item(), 1.0);
}

TEST(RiskLoss, SingleInterventionIsZero) {
  Rng rng(11);
  const auto z = Tensor::uniform({5, 2, 2, 2}, -1, 1, rng);
  PairBatch b;
  b.add({0, 1}, 0, 1.0);
  b.add({2, 3}, 1, 0.0);
  TrainConfig c;
  c.interventions = 1;
  EXPECT_EQ(risk_loss(z, b, uniform_partitions(5, 2, {0}), random_library(2, 4, 11), c, rng).item(), 0.0);
}

TEST(RiskLoss, IdenticalDrawsAreZero) {
  Rng rng(12);
  const auto z = Tensor::uniform({5, 2, 2, 2}, -1, 1, rng);
  PairBatch b;
  b.add({0, 1}, 0, 1.0);
  b.add({2, 4}, 1, 0.0);
  TrainConfig c;
  c.interventions = 4;
  // nothing is variant, so every intervened copy equals z
  EXPECT_EQ(risk_loss(z, b, uniform_partitions(5, 2, {0, 1}), random_library(2, 4, 12), c, rng).item(), 0.0);
}

TEST(RiskLoss, PropertyNonnegative) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const auto z = Tensor::uniform({6, 2, 3, 2}, -1, 1, rng);
    PairBatch b;
    for (int i = 0; i < 6; ++i) b.add({static_cast<std::uint32_t>(i % 5), 5}, i % 2, i % 2);
    TrainConfig c;
    c.interventions = 1 + rng.uniform_int(4);
    EXPECT_GE(risk_loss(z, b, uniform_partitions(6, 3, {1}), random_library(2, 6, trial), c, rng).item(), 0.0);
  }
}

TEST(RiskLoss, GradientCheck) {
  Rng rng(14);
  auto z = Tensor::uniform({5, 2, 3, 2}, -1, 1, rng, true);
  PairBatch b;
  b.add({0, 1}, 0, 1.0);
  b.add({2, 4}, 1, 0.0);
  b.add({1, 3}, 1, 1.0);
  b.add({0, 4}, 0, 0.0);
  TrainConfig c;
  c.interventions = 3;
  c.intervention_ratio = 0.6;
  const auto parts = uniform_partitions(5, 3, {0});
  const auto lib = random_library(2, 6, 14);
  const auto r = grad_check({z}, [&] {
    Rng local(77);
    return risk_loss(z, b, parts, lib, c, local);
  });
  EXPECT_LT(r.worst_relative, 1e-4);
}

// Epoch step and fitting

TEST(TotalStep, ReportIdentityHolds) {
  const auto t = toy();
  EagleModel m(tiny_config(), t.data.graph.features->dim(), t.split.train.size());
  TrainState s(m);
  for (int e = 0; e < 3; ++e) {
    const auto r = total_step(m, t.data.graph, t.split, s);
    EXPECT_NEAR(r.total, r.l_task + m.config().alpha * r.l_risk + m.config().beta * r.l_ecvae, 1e-12);
    EXPECT_GE(r.l_risk, 0.0);
    EXPECT_EQ(r.epoch, static_cast<std::size_t>(e + 1));
  }
}

TEST(TotalStep, ZeroWeightsReduceToTaskLoss) {
  const auto t = toy();
  auto c = tiny_config();
  c.alpha = 0;
  c.beta = 0;
  EagleModel m(c, t.data.graph.features->dim(), t.split.train.size());
  TrainState s(m);
  const auto r = total_step(m, t.data.graph, t.split, s);
  EXPECT_EQ(r.total, r.l_task);
}

TEST(TotalStep, SeededRunsMatch) {
  const auto t = toy();
  auto run = [&] {
    EagleModel m(tiny_config(3), t.data.graph.features->dim(), t.split.train.size());
    TrainState s(m);
    std::vector<double> out;
    for (int e = 0; e < 2; ++e) {
      const auto r = total_step(m, t.data.graph, t.split, s);
      out.insert(out.end(), {r.l_task, r.l_risk, r.l_ecvae, r.total});
    }
    for (const auto& p : m.parameters()) out.insert(out.end(), p.data().begin(), p.data().end());
    return out;
  };
  EXPECT_TRUE(bit_equal(run(), run()));
}

TEST(TotalStep, EcvaeReceivesGradientOnlyThroughItsOwnLoss) {
  const auto t = toy();
  const auto c = tiny_config();
  EagleModel m(c, t.data.graph.features->dim(), t.split.train.size());
  // Generated samples enter the intervention as constants, so the risk
  // term leaves every ECVAE parameter without a gradient.
  const auto rep = m.encoder().encode(t.data.graph, t.split.train.end);
  EnvSampleLibrary lib;
  lib.observed = build_observed(rep);
  Rng rng(15);
  lib.generated = generate_library(m.ecvae(), 50, rng);
  const auto parts = recognize_patterns(rep, t.split.train.end);
  const auto pairs = build_training_pairs(t.data.graph, t.split.train, 3);
  backward(risk_loss(rep.z, pairs, parts, lib, c, rng));
  for (const auto& p : m.ecvae().parameters()) EXPECT_FALSE(p.has_grad());
  bool encoder_grad = false;
  for (const auto& p : m.encoder().parameters()) encoder_grad = encoder_grad || p.has_grad();
  EXPECT_TRUE(encoder_grad);
}

TEST(TotalStep, TaskLossDecreasesOnToyGraph) {
  const auto t = toy(2);
  auto c = tiny_config(2);
  c.alpha = 0;
  c.beta = 0;
  c.lr = 0.01;
  EagleModel m(c, t.data.graph.features->dim(), t.split.train.size());
  TrainState s(m);
  std::vector<double> losses;
  for (int e = 0; e < 50; ++e) losses.push_back(total_step(m, t.data.graph, t.split, s).l_task);
  const double first = (losses[0] + losses[1] + losses[2]) / 3;
  const double last = (losses[47] + losses[48] + losses[49]) / 3;
  EXPECT_LT(last, first);
}

TEST(Fit, FrozenMetricStopsAtSecondEpochWithPatienceOne) {
  const auto t = toy();
  auto c = tiny_config();
  c.lr = 0.0;  // parameters never move, so the validation AUC never improves
  c.patience = 1;
  c.max_epochs = 10;
  EagleModel m(c, t.data.graph.features->dim(), t.split.train.size());
  const auto r = fit(m, t.data.graph, t.split);
  EXPECT_EQ(r.epochs_run, 2u);
  EXPECT_EQ(r.best_epoch, 1u);
}

TEST(Fit, BestEpochHoldsMaximumAndCapRespected) {
  const auto t = toy();
  auto c = tiny_config();
  c.max_epochs = 4;
  c.patience = 100;
  EagleModel m(c, t.data.graph.features->dim(), t.split.train.size());
  const auto r = fit(m, t.data.graph, t.split);
  EXPECT_EQ(r.epochs_run, 4u);
  ASSERT_EQ(r.history.size(), 4u);
  double best = -1;
  for (const auto& h : r.history) best = std::max(best, h.val_auc);
  EXPECT_EQ(r.best_val_auc, best);
  EXPECT_EQ(r.history[r.best_epoch - 1].val_auc, best);
  for (const auto& h : r.history)
    EXPECT_NEAR(h.total, h.l_task + c.alpha * h.l_risk + c.beta * h.l_ecvae, 1e-12);
}

TEST(Fit, RestoresBestParameters) {
  const auto t = toy();
  auto c = tiny_config();
  c.max_epochs = 4;
  EagleModel m(c, t.data.graph.features->dim(), t.split.train.size());
  const auto r = fit(m, t.data.graph, t.split);
  EXPECT_EQ(validation_auc(m, t.data.graph, t.split), r.best_val_auc);
}

TEST(Fit, DefaultsFollowProtocol) {
  const TrainConfig c;
  EXPECT_EQ(c.max_epochs, 1000u);
  EXPECT_EQ(c.patience, 50u);
}

// Evaluation

TEST(Evaluate, NoOodEdgesGivesEqualAucs) {
  const auto t = toy();
  EagleModel m(tiny_config(), t.data.graph.features->dim(), t.split.train.size());
  const auto r = evaluate(m, t.data.graph, t.split, {});
  EXPECT_EQ(r.auc_ood, r.auc_no_ood);
  EXPECT_FALSE(r.i_acc.has_value());
}

TEST(Evaluate, AucsInRangeAndSeededRerunIdentical) {
  const auto t = toy();
  const auto truth = *t.data.invariant_channels;
  auto run = [&] {
    EagleModel m(tiny_config(4), t.data.graph.features->dim(), t.split.train.size());
    fit(m, t.data.graph, t.split);
    return evaluate(m, t.data.graph, t.split, t.data.ood_edges, &truth);
  };
  const auto a = run(), b = run();
  for (double x : {a.auc_no_ood, a.auc_ood}) {
    EXPECT_GE(x, 0.0);
    EXPECT_LE(x, 1.0);
  }
  ASSERT_TRUE(a.i_acc.has_value());
  EXPECT_GE(*a.i_acc, 0.0);
  EXPECT_LE(*a.i_acc, 1.0);
  EXPECT_EQ(a.auc_no_ood, b.auc_no_ood);
  EXPECT_EQ(a.auc_ood, b.auc_ood);
  EXPECT_EQ(*a.i_acc, *b.i_acc);
}

TEST(Evaluate, OodEdgesChangeTheShiftedScoreOnly) {
  const auto t = toy();
  EagleModel m(tiny_config(), t.data.graph.features->dim(), t.split.train.size());
  const auto none = evaluate(m, t.data.graph, t.split, {});
  const auto with = evaluate(m, t.data.graph, t.split, t.data.ood_edges);
  const auto only = evaluate(m, t.data.graph, t.split, t.data.ood_edges, nullptr, false);
  EXPECT_EQ(with.auc_no_ood, none.auc_no_ood);
  EXPECT_NE(with.auc_ood, none.auc_ood);
  EXPECT_NE(only.auc_ood, with.auc_ood);
}

TEST(Model, ParameterNamesAlignWithParameters) {
  EagleModel m(tiny_config(), 8, 4);
  EXPECT_EQ(m.parameter_names().size(), m.parameters().size());
}

TEST(Model, MaskedTaskLossGradientReachesEncoder) {
  const auto g = eagle::testing::random_graph(6, 3, 6, 4, 20);
  auto c = tiny_config();
  c.score_scale = 1.0;
  EagleModel m(c, 4, 3);
  const auto split = SnapshotRange{0, 3};
  const auto pairs = build_training_pairs(g, split, 1);
  const auto rep = m.encoder().encode(g, 3);
  const auto parts = recognize_patterns(rep, 3);
  const auto r = grad_check(m.encoder().parameters(), [&] {
    return task_loss(scoring_view(m.encoder().encode(g, 3).z, c), pairs, &parts);
  });
  EXPECT_LT(r.worst_relative, 1e-4);
}
