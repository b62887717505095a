#pragma once

// Link-prediction objective and training loop: inner-product scores on
// invariant-masked representations, node-wise interventions that overwrite
// variant channel slices with library samples, the variance risk across
// interventions, and Adam with validation early stopping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "eagle/adam.hpp"
#include "eagle/ea_dgnn.hpp"
#include "eagle/ecvae.hpp"
#include "eagle/errors.hpp"
#include "eagle/graph.hpp"
#include "eagle/invariant.hpp"
#include "eagle/metrics.hpp"
#include "eagle/rng.hpp"
#include "eagle/tensor.hpp"

namespace eagle {

struct TrainConfig {
  double alpha = 0.1;    // risk weight
  double beta = 1e-4;    // ECVAE weight
  std::size_t interventions = 3;   // S
  double intervention_ratio = 0.6;
  double mixing_ratio = 0.5;       // P(sample drawn from S_ob)
  std::size_t num_envs = 5;        // K
  std::size_t hidden = 16;         // d'
  std::size_t layers = 2;          // L
  std::size_t latent = 16;         // d_e
  std::size_t ecvae_hidden = 64;
  std::size_t ecvae_depth = 2;
  std::size_t ecvae_batch = 256;   // S_ob minibatch per epoch; 0 = all of S_ob
  std::size_t generated_count = 0; // |S_ge|; 0 = |S_ob|
  std::int64_t quantization = kDefaultQuantization;  // Q
  PartitionRule partition_rule = PartitionRule::Threshold;
  AttentionAxis attention_axis = AttentionAxis::Channels;
  bool center_embeddings = true;   // subtract the node mean before scoring
  double score_scale = 100.0;      // multiplies every inner-product logit
  double lr = 0.003;
  std::size_t max_epochs = 1000;
  std::size_t patience = 50;
  std::uint64_t seed = 0;

  void validate() const {
    if (alpha < 0 || beta < 0) throw ConfigError("alpha and beta must be nonnegative");
    if (interventions < 1) throw ConfigError("interventions (S) must be >= 1");
    if (intervention_ratio < 0 || intervention_ratio > 1)
      throw ConfigError("intervention_ratio must lie in [0,1]");
    if (mixing_ratio < 0 || mixing_ratio > 1) throw ConfigError("mixing_ratio must lie in [0,1]");
    if (num_envs < 1 || hidden < 1 || layers < 1 || latent < 1)
      throw ConfigError("model dimensions must be positive");
    if (quantization < 1) throw ConfigError("quantization must be >= 1");
    if (lr < 0) throw ConfigError("lr must be nonnegative");
    if (!(score_scale > 0)) throw ConfigError("score_scale must be positive");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  }
};

/// Per-epoch losses (as values) and the validation AUC after the step.
struct LossReport {
  std::size_t epoch = 0;
  double l_task = 0.0;
  double l_risk = 0.0;
  double l_ecvae = 0.0;
  double total = 0.0;
  double val_auc = 0.0;
};

/// Encoder + ECVAE and everything needed to rebuild them.
class EagleModel {
 public:
  EagleModel(const TrainConfig& cfg, std::size_t input_dim, std::size_t label_times)
      : cfg_(cfg),
        input_dim_(input_dim),
        label_times_(label_times),
        encoder_(EADGNNConfig{input_dim, cfg.num_envs, cfg.hidden, cfg.layers,
                              cfg.attention_axis, derive_seed(cfg.seed, 11)}),
        ecvae_(ECVAEConfig{cfg.hidden, cfg.num_envs, label_times, cfg.latent, cfg.ecvae_hidden,
                           cfg.ecvae_depth, derive_seed(cfg.seed, 12)}) {}

  const TrainConfig& config() const noexcept { return cfg_; }
  std::size_t input_dim() const noexcept { return input_dim_; }
  std::size_t label_times() const noexcept { return label_times_; }
  const EADGNN& encoder() const noexcept { return encoder_; }
  EADGNN& encoder() noexcept { return encoder_; }
  const ECVAE& ecvae() const noexcept { return ecvae_; }
  ECVAE& ecvae() noexcept { return ecvae_; }

  std::vector<Tensor> parameters() const {
    auto out = encoder_.parameters();
    const auto more = ecvae_.parameters();
    out.insert(out.end(), more.begin(), more.end());
    return out;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (std::size_t l = 0; l < encoder_.layers().size(); ++l) {
      names.push_back("encoder.layer" + std::to_string(l) + ".weight");
      names.push_back("encoder.layer" + std::to_string(l) + ".bias");
    }
    const char* nets[] = {"ecvae.encoder", "ecvae.prior", "ecvae.decoder"};
    for (const char* net : nets)
      for (std::size_t l = 0; l <= cfg_.ecvae_depth; ++l) {
        names.push_back(std::string(net) + ".layer" + std::to_string(l) + ".weight");
        names.push_back(std::string(net) + ".layer" + std::to_string(l) + ".bias");
      }
    return names;
  }

 private:
  TrainConfig cfg_;
  std::size_t input_dim_;
  std::size_t label_times_;
  EADGNN encoder_;
  ECVAE ecvae_;
};

// ---------------------------------------------------------------------------
// Prediction

/// N x 1 x K x 1 tensor with 1 on each node's invariant channels.
inline Tensor invariant_mask(const std::vector<InvariantPartition>& partitions,
                             std::size_t num_envs) {
  std::vector<double> m(partitions.size() * num_envs, 0.0);
  for (std::size_t v = 0; v < partitions.size(); ++v)
    for (auto k : partitions[v].invariant) m[v * num_envs + k] = 1.0;
  return Tensor::from({partitions.size(), 1, num_envs, 1}, std::move(m));
}

/// z minus its mean over nodes, per time, channel and dimension.
inline Tensor center_nodes(const Tensor& z) { return sub(z, mean(z, 0, true)); }

/// The representation the training and evaluation scores are taken on:
/// optionally node-centered, scaled by sqrt(score_scale) so every inner
/// product is multiplied by score_scale.
inline Tensor scoring_view(const Tensor& z, const TrainConfig& cfg) {
  const Tensor c = cfg.center_embeddings ? center_nodes(z) : z;
  return cfg.score_scale == 1.0 ? c : scale(c, std::sqrt(cfg.score_scale));
}

/// Node pairs scored against representations at fixed times.
struct PairBatch {
  std::vector<std::size_t> u, v, t;
  std::vector<double> labels;

  std::size_t size() const noexcept { return u.size(); }
  void add(const Edge& e, std::size_t time, double label) {
    u.push_back(e.u);
    v.push_back(e.v);
    t.push_back(time);
    labels.push_back(label);
  }
};

/// Inner products of the flattened K*d' representations, with variant
/// channels zeroed when `partitions` is given.
inline Tensor pair_logits(const Tensor& z, const PairBatch& pairs,
                          const std::vector<InvariantPartition>* partitions = nullptr) {
  const std::size_t N = z.dim(0), T = z.dim(1), K = z.dim(2), d = z.dim(3);
  Tensor source = z;
  if (partitions) {
    if (partitions->size() != N) throw DimensionError("pair_logits: one partition per node required");
    source = mul(z, invariant_mask(*partitions, K));
  }
  const Tensor flat = reshape(source, {1, N * T, K * d});
  std::vector<std::size_t> ru(pairs.size()), rv(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs.t[i] >= T || pairs.u[i] >= N || pairs.v[i] >= N)
      throw DimensionError("pair_logits: pair outside representation");
    ru[i] = pairs.u[i] * T + pairs.t[i];
    rv[i] = pairs.v[i] * T + pairs.t[i];
  }
  return reshape(gather_dot(flat, std::move(ru), std::move(rv)), {pairs.size()});
}

/// sigmoid(<z_u, z_v>) at time t for each pair.
inline std::vector<double> predict_links(const Tensor& z, std::size_t t, const EdgeList& pairs,
                                         const std::vector<InvariantPartition>* partitions = nullptr) {
  NoGradGuard no_grad;
  PairBatch batch;
  for (const auto& e : pairs) batch.add(e, t, 0.0);
  const Tensor p = sigmoid(pair_logits(z, batch, partitions));
  return p.to_vector();
}

// ---------------------------------------------------------------------------
// Losses

/// Every consecutive pair (t -> t+1) inside the training range: the
/// representation at t scores the links of t+1 against an equal number of
/// freshly sampled non-links.
inline PairBatch build_training_pairs(const DynamicGraph& g, const SnapshotRange& train,
                                      std::uint64_t seed) {
  if (train.size() < 2) throw ValidationError("task_loss: training range needs at least 2 snapshots");
  PairBatch batch;
  for (std::size_t t = train.begin; t + 1 < train.end; ++t) {
    const auto& pos = g.snapshots[t + 1];
    for (const auto& e : pos) batch.add(e, t, 1.0);
    for (const auto& e : sample_negative_edges(g, t + 1, pos.size(), derive_seed(seed, t)))
      batch.add(e, t, 0.0);
  }
  if (batch.size() == 0) throw ValidationError("task_loss: training range has no links");
  return batch;
}

/// Mean binary cross-entropy of the (optionally masked) pair scores.
inline Tensor task_loss(const Tensor& z, const PairBatch& pairs,
                        const std::vector<InvariantPartition>* partitions = nullptr) {
  const Tensor logits = pair_logits(z, pairs, partitions);
  return mean(bce_with_logits(logits, Tensor::from({pairs.size()}, pairs.labels)));
}

struct InterventionResult {
  Tensor z;
  std::size_t replaced_slices = 0;
  std::vector<std::size_t> nodes;  // intervened nodes
};

/// Picks ceil(ratio * N) nodes and, for each variant channel of each picked
/// node and each time, overwrites the d' slice with an independent draw
/// from S_ob (probability `mixing_ratio`) or S_ge. Everything else passes
/// through unchanged; replacements are constants.
inline InterventionResult intervene(const Tensor& z,
                                    const std::vector<InvariantPartition>& partitions,
                                    const EnvSampleLibrary& library, double ratio,
                                    double mixing_ratio, Rng& rng) {
  if (library.empty()) throw ValidationError("intervene: empty sample library");
  const std::size_t N = z.dim(0), T = z.dim(1), K = z.dim(2), d = z.dim(3);
  if (partitions.size() != N) throw DimensionError("intervene: one partition per node required");
  InterventionResult r;
  const auto count = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(N) - 1e-12));
  r.nodes = rng.sample_without_replacement(N, std::min(count, N));
  std::sort(r.nodes.begin(), r.nodes.end());
  std::vector<double> keep, replacement;
  for (auto v : r.nodes) {
    if (partitions[v].variant.empty()) continue;
    if (keep.empty()) {
      keep.assign(z.size(), 1.0);
      replacement.assign(z.size(), 0.0);
    }
    for (auto k : partitions[v].variant)
      for (std::size_t t = 0; t < T; ++t) {
        bool observed = rng.bernoulli(mixing_ratio);
        if (library.generated.empty()) observed = true;
        if (library.observed.empty()) observed = false;
        const EnvSampleSet& pool = observed ? library.observed : library.generated;
        if (pool.dim() != d) throw DimensionError("intervene: library sample width differs from d'");
        const auto s = pool.sample(static_cast<std::size_t>(rng.uniform_int(pool.size())));
        const std::size_t off = ((v * T + t) * K + k) * d;
        std::fill_n(keep.begin() + static_cast<std::ptrdiff_t>(off), d, 0.0);
        std::copy(s.begin(), s.end(), replacement.begin() + static_cast<std::ptrdiff_t>(off));
        ++r.replaced_slices;
      }
  }
  if (r.replaced_slices == 0) {
    r.z = z;
    return r;
  }
  r.z = add(mul(z, Tensor::from(z.shape(), std::move(keep))),
            Tensor::from(z.shape(), std::move(replacement)));
  return r;
}

/// Population variance over S intervened, unmasked task losses.
inline Tensor risk_loss(const Tensor& z, const PairBatch& pairs,
                        const std::vector<InvariantPartition>& partitions,
                        const EnvSampleLibrary& library, const TrainConfig& cfg, Rng& rng) {
  std::vector<Tensor> losses;
  losses.reserve(cfg.interventions);
  for (std::size_t s = 0; s < cfg.interventions; ++s) {
    const auto intervened = intervene(z, partitions, library, cfg.intervention_ratio,
                                      cfg.mixing_ratio, rng);
    losses.push_back(task_loss(scoring_view(intervened.z, cfg), pairs));
  }
  return variance(stack(losses));
}

/// Mutable training state carried across epochs.
struct TrainState {
  Adam optimizer;
  std::size_t epoch = 0;

  TrainState(const EagleModel& model)
      : optimizer(model.parameters(), AdamOptions{model.config().lr}) {}
};

/// One epoch: encode -> S_ob -> ECVAE loss and S_ge -> partitions -> task
/// loss -> S interventions -> risk -> total -> backward -> Adam.
inline LossReport total_step(EagleModel& model, const DynamicGraph& g, const SplitSpec& split,
                             TrainState& state) {
  const TrainConfig& cfg = model.config();
  const std::size_t epoch = ++state.epoch;
  Rng rng(derive_seed(cfg.seed, 1'000'000 + epoch));

  const EnvRepresentation rep = model.encoder().encode(g, split.train.end);

  EnvSampleLibrary library;
  library.observed = build_observed(rep);
  const auto& ecfg = model.ecvae().config();
  const std::size_t n_ob = library.observed.size();
  std::vector<std::size_t> batch_idx;
  if (cfg.ecvae_batch == 0 || cfg.ecvae_batch >= n_ob) {
    batch_idx.resize(n_ob);
    for (std::size_t i = 0; i < n_ob; ++i) batch_idx[i] = i;
  } else {
    batch_idx = rng.sample_without_replacement(n_ob, cfg.ecvae_batch);
  }
  const auto [zb, yb] = library.observed.batch(batch_idx, ecfg.num_envs, ecfg.num_times);
  const Tensor eps = Tensor::normal({batch_idx.size(), ecfg.latent}, 0.0, 1.0, rng);
  const ECVAELoss vae = ecvae_loss(model.ecvae(), zb, yb, eps);
  library.generated = generate_library(model.ecvae(), cfg.generated_count ? cfg.generated_count : n_ob, rng);

  const auto partitions = recognize_patterns(rep, split.train.end, cfg.quantization, cfg.partition_rule);
  const PairBatch pairs = build_training_pairs(g, split.train, derive_seed(cfg.seed, 2'000'000 + epoch));

  const Tensor l_task = task_loss(scoring_view(rep.z, cfg), pairs, &partitions);
  const Tensor l_risk = risk_loss(rep.z, pairs, partitions, library, cfg, rng);
  const Tensor total = add(add(l_task, scale(l_risk, cfg.alpha)), scale(vae.total, cfg.beta));

  LossReport report;
  report.epoch = epoch;
  report.l_task = l_task.item();
  report.l_risk = l_risk.item();
  report.l_ecvae = vae.total.item();
  report.total = total.item();
  if (!std::isfinite(report.total))
    throw NumericError("non-finite loss at epoch " + std::to_string(epoch));
  backward(total);
  state.optimizer.step();
  return report;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

/// Positive/negative logits pooled over evaluation snapshots. Snapshot t is
/// scored from the representation at t-1 with invariant masking; the
/// encoder sees snapshots [0, last t).
struct ScoredSets {
  std::vector<double> pos, neg;
  std::vector<InvariantPartition> partitions;
};

inline ScoredSets score_eval_sets(const EagleModel& model, const DynamicGraph& g,
                                  const std::vector<EvalSet>& sets,
                                  const std::vector<EdgeList>* extra_pos = nullptr,
                                  const std::vector<EdgeList>* extra_neg = nullptr) {
  if (sets.empty()) throw ValidationError("evaluation: no evaluation snapshots");
  std::size_t last = 0;
  for (const auto& s : sets) {
    if (s.t == 0) throw ValidationError("evaluation: snapshot 0 has no history");
    last = std::max(last, s.t);
  }
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  const EnvRepresentation rep = model.encoder().encode(g, last);
  ScoredSets out;
  out.partitions = recognize_patterns(rep, last, cfg.quantization, cfg.partition_rule);
  PairBatch pos, neg;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const auto& s = sets[i];
    for (const auto& e : s.positives) pos.add(e, s.t - 1, 1.0);
    for (const auto& e : s.negatives) neg.add(e, s.t - 1, 0.0);
    if (extra_pos)
      for (const auto& e : (*extra_pos)[i]) pos.add(e, s.t - 1, 1.0);
    if (extra_neg)
      for (const auto& e : (*extra_neg)[i]) neg.add(e, s.t - 1, 0.0);
  }
  if (pos.size() == 0 || neg.size() == 0) throw ValidationError("evaluation: empty positive or negative set");
  const Tensor z = scoring_view(rep.z, cfg);
  out.pos = pair_logits(z, pos, &out.partitions).to_vector();
  out.neg = pair_logits(z, neg, &out.partitions).to_vector();
  return out;
}

inline double validation_auc(const EagleModel& model, const DynamicGraph& g, const SplitSpec& split) {
  const auto scored = score_eval_sets(model, g, split.val_sets);
  return auc(scored.pos, scored.neg);
}

struct FitResult {
  std::size_t best_epoch = 0;
  double best_val_auc = -1.0;
  std::size_t epochs_run = 0;
  std::vector<LossReport> history;
};

/// Runs total_step up to max_epochs, stops after `patience` epochs without
/// a validation improvement, and restores the best epoch's parameters.
inline FitResult fit(EagleModel& model, const DynamicGraph& g, const SplitSpec& split,
                     TrainState& state) {
  const TrainConfig& cfg = model.config();
  cfg.validate();
  auto params = model.parameters();
  std::vector<std::vector<double>> best(params.size());
  FitResult result;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    LossReport report = total_step(model, g, split, state);
    report.val_auc = validation_auc(model, g, split);
    result.history.push_back(report);
    result.epochs_run = epoch;
    if (report.val_auc > result.best_val_auc) {
      result.best_val_auc = report.val_auc;
      result.best_epoch = epoch;
      since_best = 0;
      for (std::size_t i = 0; i < params.size(); ++i) best[i] = params[i].to_vector();
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    std::copy(best[i].begin(), best[i].end(), params[i].mutable_data().begin());
  return result;
}

inline FitResult fit(EagleModel& model, const DynamicGraph& g, const SplitSpec& split) {
  TrainState state(model);
  return fit(model, g, split, state);
}

// ---------------------------------------------------------------------------

struct EvalResult {
  double auc_no_ood = 0.0;
  double auc_ood = 0.0;
  std::optional<double> i_acc;
  std::vector<InvariantPartition> partitions;
};

/// Test AUC without and with the withheld links. OOD links join the test
/// positives together with the same number of extra seeded non-links; with
/// `mix_in_distribution` off they are scored against those non-links alone.
inline EvalResult evaluate(const EagleModel& model, const DynamicGraph& g, const SplitSpec& split,
                           const std::vector<EdgeList>& ood_edges,
                           const std::vector<std::size_t>* invariant_truth = nullptr,
                           bool mix_in_distribution = true) {
  for (const auto& s : split.test_sets)
    if (s.positives.empty()) throw ValidationError("evaluate: empty test positives at snapshot " + std::to_string(s.t));
  EvalResult r;
  const auto base = score_eval_sets(model, g, split.test_sets);
  r.auc_no_ood = auc(base.pos, base.neg);
  r.partitions = base.partitions;

  std::vector<EdgeList> extra_pos(split.test_sets.size()), extra_neg(split.test_sets.size());
  bool any = false;
  for (std::size_t i = 0; i < split.test_sets.size(); ++i) {
    const auto& s = split.test_sets[i];
    if (s.t >= ood_edges.size() || ood_edges[s.t].empty()) continue;
    any = true;
    extra_pos[i] = ood_edges[s.t];
    std::unordered_set<std::uint64_t> exclude;
    for (const auto& e : ood_edges[s.t]) exclude.insert(edge_key(e.u, e.v));
    for (const auto& e : s.negatives) exclude.insert(edge_key(e.u, e.v));
    extra_neg[i] = sample_negative_edges(g, s.t, extra_pos[i].size(),
                                         derive_seed(split.seed, 50'000 + s.t), &exclude);
  }
  if (any && mix_in_distribution) {
    const auto shifted = score_eval_sets(model, g, split.test_sets, &extra_pos, &extra_neg);
    r.auc_ood = auc(shifted.pos, shifted.neg);
  } else if (any) {
    std::vector<EvalSet> only;
    for (std::size_t i = 0; i < split.test_sets.size(); ++i)
      if (!extra_pos[i].empty())
        only.push_back(EvalSet{split.test_sets[i].t, extra_pos[i], extra_neg[i]});
    const auto shifted = score_eval_sets(model, g, only);
    r.auc_ood = auc(shifted.pos, shifted.neg);
  } else {
    r.auc_ood = r.auc_no_ood;
  }
  if (invariant_truth) r.i_acc = i_acc(r.partitions, *invariant_truth, model.config().num_envs);
  return r;
}

}  // namespace eagle
