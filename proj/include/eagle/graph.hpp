#pragma once

// Discrete-snapshot dynamic graphs: storage, text ingestion, chronological
// splits, negative sampling, link-attribute filtering and the two synthetic
// distribution-shift generators.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "eagle/errors.hpp"
#include "eagle/rng.hpp"
#include "eagle/tensor.hpp"

namespace eagle {

inline constexpr std::int32_t kNoAttribute = -1;

/// Undirected edge stored with u < v.
struct Edge {
  std::uint32_t u = 0;
  std::uint32_t v = 0;
  std::int32_t attr = kNoAttribute;

  friend bool operator==(const Edge& a, const Edge& b) { return a.u == b.u && a.v == b.v; }
};

using EdgeList = std::vector<Edge>;

inline std::uint64_t edge_key(std::size_t u, std::size_t v) {
  if (u > v) std::swap(u, v);
  return (static_cast<std::uint64_t>(u) << 32) | static_cast<std::uint64_t>(v);
}

/// Sorts by (u, v) and drops repeated pairs, keeping the first occurrence.
inline void canonicalize(EdgeList& edges) {
  for (auto& e : edges)
    if (e.u > e.v) std::swap(e.u, e.v);
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
    return a.u != b.u ? a.u < b.u : a.v < b.v;
  });
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
}

/// Node features laid out N x T x d.
class NodeFeatures {
 public:
  NodeFeatures() = default;
  NodeFeatures(std::size_t nodes, std::size_t times, std::size_t dim)
      : nodes_(nodes), times_(times), dim_(dim), values_(nodes * times * dim, 0.0) {}

  std::size_t nodes() const noexcept { return nodes_; }
  std::size_t times() const noexcept { return times_; }
  std::size_t dim() const noexcept { return dim_; }

  double& at(std::size_t v, std::size_t t, std::size_t i) {
    return values_[(v * times_ + t) * dim_ + i];
  }
  double at(std::size_t v, std::size_t t, std::size_t i) const {
    return values_[(v * times_ + t) * dim_ + i];
  }
  std::span<const double> values() const noexcept { return values_; }

  /// N x d constant tensor of the features at time t.
  Tensor snapshot(std::size_t t) const {
    std::vector<double> out(nodes_ * dim_);
    for (std::size_t v = 0; v < nodes_; ++v)
      std::copy_n(values_.begin() + static_cast<std::ptrdiff_t>((v * times_ + t) * dim_), dim_,
                  out.begin() + static_cast<std::ptrdiff_t>(v * dim_));
    return Tensor::from({nodes_, dim_}, std::move(out));
  }

  friend bool operator==(const NodeFeatures&, const NodeFeatures&) = default;

 private:
  std::size_t nodes_ = 0, times_ = 0, dim_ = 0;
  std::vector<double> values_;
};

struct DynamicGraph {
  std::size_t num_nodes = 0;
  std::vector<EdgeList> snapshots;
  std::optional<NodeFeatures> features;

  std::size_t num_snapshots() const noexcept { return snapshots.size(); }

  std::size_t total_edges() const {
    std::size_t n = 0;
    for (const auto& s : snapshots) n += s.size();
    return n;
  }

  std::unordered_set<std::uint64_t> edge_set(std::size_t t) const {
    std::unordered_set<std::uint64_t> keys;
    keys.reserve(snapshots.at(t).size() * 2);
    for (const auto& e : snapshots[t]) keys.insert(edge_key(e.u, e.v));
    return keys;
  }
};

// ---------------------------------------------------------------------------
// Text formats

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::optional<long long> parse_int(std::string_view s) {
  long long value = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return value;
}

}  // namespace detail

/// Reads `t u v [attr]` lines. Lines starting with '#' and blank lines are
/// skipped; duplicate edges within a snapshot collapse to the first one.
inline DynamicGraph parse_edgelist(std::istream& in, std::size_t num_nodes,
                                   std::size_t num_snapshots) {
  DynamicGraph g;
  g.num_nodes = num_nodes;
  g.snapshots.resize(num_snapshots);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto tokens = detail::split_ws(line);
    if (tokens.empty() || tokens.front().front() == '#') continue;
    if (tokens.size() != 3 && tokens.size() != 4)
      throw ParseError("expected 't u v [attr]', got " + std::to_string(tokens.size()) + " fields",
                       lineno);
    long long vals[4] = {0, 0, 0, kNoAttribute};
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      auto parsed = detail::parse_int(tokens[i]);
      if (!parsed || *parsed < 0)
        throw ParseError("not a nonnegative integer: '" + std::string(tokens[i]) + "'", lineno);
      vals[i] = *parsed;
    }
    const auto t = static_cast<std::size_t>(vals[0]);
    const auto u = static_cast<std::size_t>(vals[1]);
    const auto v = static_cast<std::size_t>(vals[2]);
    if (t >= num_snapshots)
      throw ValidationError("line " + std::to_string(lineno) + ": snapshot " + std::to_string(t) +
                            " out of range [0," + std::to_string(num_snapshots) + ")");
    if (u >= num_nodes || v >= num_nodes)
      throw ValidationError("line " + std::to_string(lineno) + ": node index out of range [0," +
                            std::to_string(num_nodes) + ")");
    if (u == v)
      throw ValidationError("line " + std::to_string(lineno) + ": self-loop on node " +
                            std::to_string(u));
    if (vals[3] > std::numeric_limits<std::int32_t>::max())
      throw ParseError("attribute too large", lineno);
    g.snapshots[t].push_back(Edge{static_cast<std::uint32_t>(u), static_cast<std::uint32_t>(v),
                                  static_cast<std::int32_t>(vals[3])});
  }
  for (auto& s : g.snapshots) canonicalize(s);
  return g;
}

inline DynamicGraph load_edgelist(const std::string& path, std::size_t num_nodes,
                                  std::size_t num_snapshots) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open edge list '" + path + "'");
  return parse_edgelist(in, num_nodes, num_snapshots);
}

inline void write_edgelist(std::ostream& out, const DynamicGraph& g) {
  for (std::size_t t = 0; t < g.num_snapshots(); ++t)
    for (const auto& e : g.snapshots[t]) {
      out << t << ' ' << e.u << ' ' << e.v;
      if (e.attr != kNoAttribute) out << ' ' << e.attr;
      out << '\n';
    }
}

/// CSV with header `node,t,f0,...,f{d-1}`; absent (node, t) rows stay zero.
inline NodeFeatures parse_features(std::istream& in, std::size_t num_nodes,
                                   std::size_t num_snapshots) {
  std::string line;
  std::size_t lineno = 0;
  auto split_csv = [](const std::string& s) {
    std::vector<std::string> cells;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
  };
  if (!std::getline(in, line)) throw ParseError("missing feature header", 1);
  ++lineno;
  const auto header = split_csv(line);
  if (header.size() < 3 || header[0] != "node" || header[1] != "t")
    throw ParseError("feature header must be 'node,t,f0,...'", lineno);
  const std::size_t dim = header.size() - 2;
  NodeFeatures f(num_nodes, num_snapshots, dim);
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != dim + 2)
      throw ParseError("expected " + std::to_string(dim + 2) + " columns", lineno);
    const auto node = detail::parse_int(cells[0]);
    const auto t = detail::parse_int(cells[1]);
    if (!node || !t || *node < 0 || *t < 0) throw ParseError("bad node/t index", lineno);
    if (static_cast<std::size_t>(*node) >= num_nodes ||
        static_cast<std::size_t>(*t) >= num_snapshots)
      throw ValidationError("line " + std::to_string(lineno) + ": feature row out of range");
    for (std::size_t i = 0; i < dim; ++i) {
      try {
        std::size_t used = 0;
        const double x = std::stod(cells[i + 2], &used);
        if (used != cells[i + 2].size()) throw std::invalid_argument("trailing");
        f.at(static_cast<std::size_t>(*node), static_cast<std::size_t>(*t), i) = x;
      } catch (const std::exception&) {
        throw ParseError("bad feature value '" + cells[i + 2] + "'", lineno);
      }
    }
  }
  return f;
}

inline NodeFeatures load_features(const std::string& path, std::size_t num_nodes,
                                  std::size_t num_snapshots) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open feature file '" + path + "'");
  return parse_features(in, num_nodes, num_snapshots);
}

inline void write_features(std::ostream& out, const NodeFeatures& f) {
  out << "node,t";
  for (std::size_t i = 0; i < f.dim(); ++i) out << ",f" << i;
  out << '\n';
  out << std::setprecision(17);
  for (std::size_t v = 0; v < f.nodes(); ++v)
    for (std::size_t t = 0; t < f.times(); ++t) {
      out << v << ',' << t;
      for (std::size_t i = 0; i < f.dim(); ++i) out << ',' << f.at(v, t, i);
      out << '\n';
    }
}

/// Seeded standard-normal features, constant over time.
inline NodeFeatures random_features(std::size_t num_nodes, std::size_t num_snapshots,
                                    std::size_t dim, std::uint64_t seed) {
  NodeFeatures f(num_nodes, num_snapshots, dim);
  Rng rng(seed);
  for (std::size_t v = 0; v < num_nodes; ++v)
    for (std::size_t i = 0; i < dim; ++i) {
      const double x = rng.normal();
      for (std::size_t t = 0; t < num_snapshots; ++t) f.at(v, t, i) = x;
    }
  return f;
}

// ---------------------------------------------------------------------------
// Splits and negatives

/// Half-open snapshot index range.
struct SnapshotRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - begin; }
  bool contains(std::size_t t) const noexcept { return t >= begin && t < end; }
  friend bool operator==(const SnapshotRange&, const SnapshotRange&) = default;
};

/// Labeled pairs for one evaluation snapshot.
struct EvalSet {
  std::size_t t = 0;
  EdgeList positives;
  EdgeList negatives;
};

struct SplitSpec {
  SnapshotRange train, val, test;
  std::vector<EvalSet> val_sets;
  std::vector<EvalSet> test_sets;
  std::uint64_t seed = 0;
};

/// Uniformly samples `count` distinct node pairs absent from snapshot t
/// (and from `exclude`, if given).
inline EdgeList sample_negative_edges(const DynamicGraph& g, std::size_t t, std::size_t count,
                                      std::uint64_t seed,
                                      const std::unordered_set<std::uint64_t>* exclude = nullptr) {
  const std::size_t n = g.num_nodes;
  auto blocked = g.edge_set(t);
  if (exclude) blocked.insert(exclude->begin(), exclude->end());
  const std::size_t all_pairs = n < 2 ? 0 : n * (n - 1) / 2;
  const std::size_t available = all_pairs - std::min(all_pairs, blocked.size());
  if (count > available)
    throw ValidationError("sample_negative_edges: requested " + std::to_string(count) +
                          " negatives but snapshot " + std::to_string(t) + " has only " +
                          std::to_string(available) + " non-edges");
  Rng rng(seed);
  EdgeList out;
  out.reserve(count);
  if (count * 2 <= available) {
    std::unordered_set<std::uint64_t> chosen;
    chosen.reserve(count * 2);
    while (out.size() < count) {
      const auto u = static_cast<std::size_t>(rng.uniform_int(n));
      const auto v = static_cast<std::size_t>(rng.uniform_int(n));
      if (u == v) continue;
      const auto key = edge_key(u, v);
      if (blocked.count(key) || !chosen.insert(key).second) continue;
      out.push_back(Edge{static_cast<std::uint32_t>(std::min(u, v)),
                         static_cast<std::uint32_t>(std::max(u, v)), kNoAttribute});
    }
    return out;
  }
  EdgeList candidates;
  candidates.reserve(available);
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = u + 1; v < n; ++v)
      if (!blocked.count(edge_key(u, v)))
        candidates.push_back(
            Edge{static_cast<std::uint32_t>(u), static_cast<std::uint32_t>(v), kNoAttribute});
  for (auto i : rng.sample_without_replacement(candidates.size(), count))
    out.push_back(candidates[i]);
  return out;
}

/// Contiguous train/val/test ranges in time order. Every val/test snapshot
/// gets a fixed, seeded negative set the same size as its positive set.
inline SplitSpec chronological_split(const DynamicGraph& g, std::size_t train_n,
                                     std::size_t val_n, std::size_t test_n,
                                     std::uint64_t seed = 0) {
  const std::size_t total = g.num_snapshots();
  if (train_n + val_n + test_n != total)
    throw ValidationError("chronological_split: " + std::to_string(train_n) + "/" +
                          std::to_string(val_n) + "/" + std::to_string(test_n) +
                          " does not sum to T=" + std::to_string(total));
  if (train_n == 0 || val_n == 0 || test_n == 0)
    throw ValidationError("chronological_split: every range needs at least one snapshot");
  SplitSpec split;
  split.seed = seed;
  split.train = {0, train_n};
  split.val = {train_n, train_n + val_n};
  split.test = {train_n + val_n, total};
  auto make_set = [&](std::size_t t) {
    EvalSet s;
    s.t = t;
    s.positives = g.snapshots[t];
    s.negatives = sample_negative_edges(g, t, s.positives.size(), derive_seed(seed, t));
    return s;
  };
  for (std::size_t t = split.val.begin; t < split.val.end; ++t) split.val_sets.push_back(make_set(t));
  for (std::size_t t = split.test.begin; t < split.test.end; ++t)
    split.test_sets.push_back(make_set(t));
  return split;
}

// ---------------------------------------------------------------------------
// Link-attribute filtering

struct AttributeFilterResult {
  DynamicGraph train_view;           // attributes stripped
  std::vector<EdgeList> ood_edges;   // per snapshot, removed edges as they were
  bool attribute_found = false;
};

/// Removes every edge carrying `attribute`. The removed edges are returned
/// separately for test-time use only.
inline AttributeFilterResult apply_attribute_filter(const DynamicGraph& g,
                                                    std::int32_t attribute) {
  AttributeFilterResult r;
  r.train_view.num_nodes = g.num_nodes;
  r.train_view.features = g.features;
  r.train_view.snapshots.resize(g.num_snapshots());
  r.ood_edges.resize(g.num_snapshots());
  for (std::size_t t = 0; t < g.num_snapshots(); ++t)
    for (Edge e : g.snapshots[t]) {
      if (e.attr == attribute) {
        r.attribute_found = true;
        r.ood_edges[t].push_back(e);
      } else {
        e.attr = kNoAttribute;
        r.train_view.snapshots[t].push_back(e);
      }
    }
  return r;
}

// ---------------------------------------------------------------------------
// Feature-shift generator

/// clip(p_bar + sigma * cos(t), 0, 1)
inline double shift_probability(double p_bar, double sigma, std::size_t t) {
  return std::clamp(p_bar + sigma * std::cos(static_cast<double>(t)), 0.0, 1.0);
}

struct FeatureShiftParams {
  double p_bar_train = 0.4;
  double sigma_train = 0.05;
  double p_bar_test = 0.1;
  double sigma_test = 0.0;
  /// First snapshot generated with the test setting; 0 applies the train
  /// setting everywhere.
  std::size_t test_start = 0;
  std::size_t iters = 200;
  double lr = 0.05;
  std::uint64_t seed = 0;
};

/// Fits X' (N x d) so that sigmoid(x'_u . x'_v) reconstructs a sampled set
/// of labeled pairs, by full-batch gradient descent on mean logistic loss.
inline std::vector<double> fit_pair_embeddings(std::size_t num_nodes, std::size_t dim,
                                               const EdgeList& pairs,
                                               const std::vector<double>& labels,
                                               std::size_t iters, double lr, Rng& rng) {
  std::vector<double> x(num_nodes * dim);
  for (auto& v : x) v = rng.normal(0.0, 0.1);
  if (pairs.empty()) return x;
  std::vector<double> grad(x.size());
  const double inv = 1.0 / static_cast<double>(pairs.size());
  for (std::size_t it = 0; it < iters; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      const double* xu = &x[pairs[p].u * dim];
      const double* xv = &x[pairs[p].v * dim];
      double dot = 0.0;
      for (std::size_t i = 0; i < dim; ++i) dot += xu[i] * xv[i];
      const double s = 1.0 / (1.0 + std::exp(-dot));
      const double coeff = (s - labels[p]) * inv;
      for (std::size_t i = 0; i < dim; ++i) {
        grad[pairs[p].u * dim + i] += coeff * xv[i];
        grad[pairs[p].v * dim + i] += coeff * xu[i];
      }
    }
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= lr * grad[i];
  }
  return x;
}

/// Appends shifted features X'^t fitted to a p(t)-biased sample of the
/// next snapshot's links; output features are [X^t || X'^t] (dim 2d). The
/// last snapshot has no successor and is fitted to its own links.
inline DynamicGraph gen_feature_shift(const DynamicGraph& g, const FeatureShiftParams& params) {
  const std::size_t T = g.num_snapshots();
  if (T < 2) throw ValidationError("gen_feature_shift: needs at least 2 snapshots");
  if (!g.features) throw ValidationError("gen_feature_shift: graph has no base features");
  const NodeFeatures& base = *g.features;
  const std::size_t d = base.dim();
  const std::size_t N = g.num_nodes;
  DynamicGraph out = g;
  NodeFeatures shifted(N, T, 2 * d);
  for (std::size_t t = 0; t < T; ++t) {
    const bool testing = params.test_start > 0 && t >= params.test_start;
    const double p = testing ? shift_probability(params.p_bar_test, params.sigma_test, t)
                             : shift_probability(params.p_bar_train, params.sigma_train, t);
    const std::size_t target = std::min(t + 1, T - 1);
    const EdgeList& next = g.snapshots[target];
    Rng rng(derive_seed(params.seed, t));
    const auto n_pos = static_cast<std::size_t>(std::llround(p * static_cast<double>(next.size())));
    auto n_neg = static_cast<std::size_t>(std::llround((1.0 - p) * static_cast<double>(next.size())));
    const std::size_t all_pairs = N * (N - 1) / 2;
    n_neg = std::min(n_neg, all_pairs - next.size());
    EdgeList pairs;
    std::vector<double> labels;
    for (auto i : rng.sample_without_replacement(next.size(), n_pos)) {
      pairs.push_back(next[i]);
      labels.push_back(1.0);
    }
    for (const auto& e : sample_negative_edges(g, target, n_neg, rng.next())) {
      pairs.push_back(e);
      labels.push_back(0.0);
    }
    const auto x = fit_pair_embeddings(N, d, pairs, labels, params.iters, params.lr, rng);
    for (std::size_t v = 0; v < N; ++v)
      for (std::size_t i = 0; i < d; ++i) {
        shifted.at(v, t, i) = base.at(v, t, i);
        shifted.at(v, t, d + i) = x[v * d + i];
      }
  }
  out.features = std::move(shifted);
  return out;
}

/// Single-setting form: the same (p_bar, sigma) at every snapshot.
inline DynamicGraph gen_feature_shift(const DynamicGraph& g, double p_bar, double sigma,
                                      std::uint64_t seed, std::size_t iters = 200) {
  FeatureShiftParams p;
  p.p_bar_train = p_bar;
  p.sigma_train = sigma;
  p.seed = seed;
  p.iters = iters;
  return gen_feature_shift(g, p);
}

// ---------------------------------------------------------------------------
// K-Gaussian environment generator

struct EnvSyntheticParams {
  std::size_t num_nodes = 400;
  std::size_t num_snapshots = 10;
  std::size_t num_envs = 5;
  std::size_t channel_dim = 8;
  double sigma_e = 0.6;  // fraction of slightly perturbed (invariant) channels
  double q_bar = 0.8;    // fraction of last-channel links injected at test time
  std::size_t neighbors = 3;
  double small_noise = 0.1;
  double large_noise = 1.0;
  /// First test snapshot; 0 means T - round(T/5) (the 6/2/2 layout at T=10).
  std::size_t test_start = 0;
  std::uint64_t seed = 0;

  std::size_t resolved_test_start() const {
    if (test_start > 0) return test_start;
    return num_snapshots - static_cast<std::size_t>(std::llround(num_snapshots / 5.0));
  }
  std::size_t num_invariant() const {
    return static_cast<std::size_t>(std::llround(sigma_e * static_cast<double>(num_envs)));
  }
};

struct EnvSyntheticData {
  DynamicGraph graph;                        // edge attribute = generating channel
  std::vector<std::size_t> invariant_channels;
  std::int32_t ood_attribute = 0;            // the last channel
};

namespace detail {

// Indices of the m most cosine-similar other nodes of every node.
inline std::vector<std::vector<std::size_t>> top_similar(const std::vector<double>& x,
                                                         std::size_t n, std::size_t dim,
                                                         std::size_t m) {
  std::vector<double> unit(x);
  for (std::size_t v = 0; v < n; ++v) {
    double norm = 0.0;
    for (std::size_t i = 0; i < dim; ++i) norm += unit[v * dim + i] * unit[v * dim + i];
    norm = std::sqrt(norm);
    if (norm > 0)
      for (std::size_t i = 0; i < dim; ++i) unit[v * dim + i] /= norm;
  }
  std::vector<std::vector<std::size_t>> out(n);
  std::vector<std::pair<double, std::size_t>> sims(n);
  for (std::size_t v = 0; v < n; ++v) {
    sims.clear();
    for (std::size_t u = 0; u < n; ++u) {
      if (u == v) continue;
      double s = 0.0;
      for (std::size_t i = 0; i < dim; ++i) s += unit[v * dim + i] * unit[u * dim + i];
      sims.emplace_back(-s, u);
    }
    const std::size_t k = std::min(m, sims.size());
    std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(k), sims.end());
    for (std::size_t i = 0; i < k; ++i) out[v].push_back(sims[i].second);
  }
  return out;
}

}  // namespace detail

/// Per-channel node features from K Gaussians; the first round(sigma_e*K)
/// channels get small per-snapshot noise and the rest large noise. Links of
/// each channel join every node to its top-m cosine neighbours in that
/// channel. Last-channel links are withheld before `test_start` and a q_bar
/// fraction of them is kept afterwards.
inline EnvSyntheticData gen_env_synthetic(const EnvSyntheticParams& p) {
  if (p.num_nodes < 4) throw ValidationError("gen_env_synthetic: need at least 4 nodes");
  if (p.num_envs < 2) throw ValidationError("gen_env_synthetic: need K >= 2");
  if (p.sigma_e < 0 || p.sigma_e > 1 || p.q_bar < 0 || p.q_bar > 1)
    throw ValidationError("gen_env_synthetic: sigma_e and q_bar must lie in [0,1]");
  if (p.num_snapshots < 2) throw ValidationError("gen_env_synthetic: need T >= 2");
  const std::size_t N = p.num_nodes, T = p.num_snapshots, K = p.num_envs, dc = p.channel_dim;
  const std::size_t n_inv = p.num_invariant();
  const std::size_t test_start = p.resolved_test_start();
  const auto ood = static_cast<std::int32_t>(K - 1);

  Rng rng(p.seed);
  std::vector<double> base(N * K * dc);  // [v][k][i]
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<double> mu(dc);
    for (auto& m : mu) m = rng.uniform(-1.0, 1.0);
    for (std::size_t v = 0; v < N; ++v)
      for (std::size_t i = 0; i < dc; ++i) base[(v * K + k) * dc + i] = rng.normal(mu[i], 1.0);
  }

  EnvSyntheticData out;
  out.ood_attribute = ood;
  for (std::size_t k = 0; k < n_inv; ++k) out.invariant_channels.push_back(k);
  DynamicGraph& g = out.graph;
  g.num_nodes = N;
  g.snapshots.resize(T);
  NodeFeatures features(N, T, K * dc);

  for (std::size_t t = 0; t < T; ++t) {
    Rng noise(derive_seed(p.seed, 1000 + t));
    for (std::size_t k = 0; k < K; ++k) {
      const double std_dev = k < n_inv ? p.small_noise : p.large_noise;
      std::vector<double> xk(N * dc);
      for (std::size_t v = 0; v < N; ++v)
        for (std::size_t i = 0; i < dc; ++i) {
          const double x = base[(v * K + k) * dc + i] + noise.normal(0.0, std_dev);
          xk[v * dc + i] = x;
          features.at(v, t, k * dc + i) = x;
        }
      const auto nbrs = detail::top_similar(xk, N, dc, p.neighbors);
      EdgeList channel_edges;
      for (std::size_t v = 0; v < N; ++v)
        for (auto u : nbrs[v])
          channel_edges.push_back(Edge{static_cast<std::uint32_t>(std::min(u, v)),
                                       static_cast<std::uint32_t>(std::max(u, v)),
                                       static_cast<std::int32_t>(k)});
      canonicalize(channel_edges);
      if (static_cast<std::int32_t>(k) == ood) {
        if (t < test_start) continue;
        const auto keep = static_cast<std::size_t>(
            std::llround(p.q_bar * static_cast<double>(channel_edges.size())));
        auto picked = noise.sample_without_replacement(channel_edges.size(), keep);
        std::sort(picked.begin(), picked.end());
        EdgeList kept;
        for (auto i : picked) kept.push_back(channel_edges[i]);
        channel_edges = std::move(kept);
      }
      auto& snap = g.snapshots[t];
      snap.insert(snap.end(), channel_edges.begin(), channel_edges.end());
    }
    // lower channel index wins for links generated by several channels
    canonicalize(g.snapshots[t]);
  }
  g.features = std::move(features);
  return out;
}

}  // namespace eagle
