#pragma once

// Environment-aware dynamic GNN: K-channel projections with a relative time
// encoding, channel-normalized edge weights with residual neighbour sums,
// and a causal prefix mean over time.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "eagle/graph.hpp"
#include "eagle/rng.hpp"
#include "eagle/tensor.hpp"

namespace eagle {

/// Which set the edge weights are normalized over.
enum class AttentionAxis {
  Channels,   // sum over k' of the same edge is 1
  Neighbors,  // sum over incoming edges of a node, per channel, is 1
};

/// Sinusoidal encoding: [2i] = sin(t / 10000^(2i/d)), [2i+1] = cos(...).
inline std::vector<double> rte_encode(std::size_t t, std::size_t d) {
  if (d % 2 != 0) throw DimensionError("rte_encode: dimension must be even, got " + std::to_string(d));
  std::vector<double> out(d);
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double freq = std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
    const double angle = static_cast<double>(t) / freq;
    out[2 * i] = std::sin(angle);
    out[2 * i + 1] = std::cos(angle);
  }
  return out;
}

/// Per-channel projection parameters of one convolution layer.
struct EAConvLayer {
  Tensor weight;  // K x d_in x d_out
  Tensor bias;    // K x 1 x d_out

  std::size_t num_envs() const { return weight.dim(0); }
  std::size_t in_dim() const { return weight.dim(1); }
  std::size_t out_dim() const { return weight.dim(2); }

  /// Uniform(-1/sqrt(d_in), 1/sqrt(d_in)); each channel draws from its own
  /// sub-seed so the K subspaces start apart.
  static EAConvLayer init(std::size_t num_envs, std::size_t in_dim, std::size_t out_dim,
                          std::uint64_t seed) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    std::vector<double> w(num_envs * in_dim * out_dim), b(num_envs * out_dim);
    for (std::size_t k = 0; k < num_envs; ++k) {
      Rng rng(derive_seed(seed, k));
      for (std::size_t i = 0; i < in_dim * out_dim; ++i)
        w[k * in_dim * out_dim + i] = rng.uniform(-bound, bound);
      for (std::size_t i = 0; i < out_dim; ++i) b[k * out_dim + i] = rng.uniform(-bound, bound);
    }
    return {Tensor::from({num_envs, in_dim, out_dim}, std::move(w), true),
            Tensor::from({num_envs, 1, out_dim}, std::move(b), true)};
  }
};

/// Directed message list for one snapshot: each undirected edge appears
/// once in each direction.
struct SnapshotAdjacency {
  std::vector<std::size_t> src;
  std::vector<std::size_t> dst;

  static SnapshotAdjacency from_edges(const EdgeList& edges) {
    SnapshotAdjacency adj;
    adj.src.reserve(edges.size() * 2);
    adj.dst.reserve(edges.size() * 2);
    for (const auto& e : edges) {
      adj.src.push_back(e.u);
      adj.dst.push_back(e.v);
      adj.src.push_back(e.v);
      adj.dst.push_back(e.u);
    }
    return adj;
  }
};

struct EAConvOutput {
  Tensor z;          // K x N x d_out, after the projection and activation
  Tensor z_hat;      // K x N x d_out, after neighbour aggregation
  Tensor attention;  // K x E, one column per directed edge
};

/// x^t (+) RTE(t) as a 1 x N x d tensor shared by all channels.
inline Tensor layer_input(const Tensor& features, std::size_t t) {
  const std::size_t n = features.dim(0), d = features.dim(1);
  const Tensor rte = Tensor::from({1, d}, rte_encode(t, d));
  return reshape(add(features, rte), {1, n, d});
}

/// One spatial EAConv layer. `input` is 1 x N x d_in (shared) or
/// K x N x d_in (per channel).
inline EAConvOutput eaconv_forward(const EAConvLayer& layer, const Tensor& input,
                                   const SnapshotAdjacency& adj,
                                   AttentionAxis axis = AttentionAxis::Channels) {
  if (input.rank() != 3 || input.dim(2) != layer.in_dim() ||
      (input.dim(0) != 1 && input.dim(0) != layer.num_envs()))
    throw DimensionError("eaconv_forward: input " + shape_str(input.shape()) +
                         " does not fit layer weights " + shape_str(layer.weight.shape()));
  const std::size_t n = input.dim(1);
  EAConvOutput out;
  out.z = sigmoid(add(bmm(input, layer.weight), layer.bias));
  if (adj.src.empty()) {
    out.z_hat = out.z;
    out.attention = Tensor::zeros({layer.num_envs(), 0});
    return out;
  }
  const Tensor logits = gather_dot(out.z, adj.src, adj.dst);  // K x E
  if (axis == AttentionAxis::Channels) {
    out.attention = softmax(logits, 0);
  } else {
    double shift = 0.0;
    for (double v : logits.data()) shift = std::max(shift, v);
    const Tensor e = exp(add_scalar(logits, -shift));
    const Tensor denom = scatter_add(e, 1, adj.dst, n);
    out.attention = div(e, index_select(denom, 1, adj.dst));
  }
  out.z_hat = add(out.z, edge_aggregate(out.attention, out.z, adj.src, adj.dst));
  return out;
}

/// Causal prefix mean along the leading (time) axis of a T x ... tensor.
inline Tensor prefix_mean_time_major(const Tensor& x) {
  const std::size_t T = x.dim(0);
  const std::size_t rest = x.size() / std::max<std::size_t>(T, 1);
  std::vector<double> avg(T * T, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t tau = 0; tau <= t; ++tau) avg[t * T + tau] = 1.0 / static_cast<double>(t + 1);
  const Tensor pooled = matmul(Tensor::from({T, T}, std::move(avg)), reshape(x, {T, rest}));
  return reshape(pooled, x.shape());
}

/// z[v][t] = mean of pre_pool[v][0..t] for an N x T x K x d tensor.
inline Tensor temporal_mean(const Tensor& pre_pool) {
  if (pre_pool.rank() != 4) throw DimensionError("temporal_mean: expected N x T x K x d");
  const Tensor time_major = permute(pre_pool, {1, 0, 2, 3});
  return permute(prefix_mean_time_major(time_major), {1, 0, 2, 3});
}

/// Output of the encoder; both tensors are N x T x K x d'.
struct EnvRepresentation {
  Tensor z;
  Tensor pre_pool;
  /// attention[t * L + l] is the K x E weight tensor of layer l at time t.
  std::vector<Tensor> attention;

  std::size_t num_nodes() const { return z.dim(0); }
  std::size_t num_times() const { return z.dim(1); }
  std::size_t num_envs() const { return z.dim(2); }
  std::size_t dim() const { return z.dim(3); }
  double at(std::size_t v, std::size_t t, std::size_t k, std::size_t i) const {
    return z[((v * num_times() + t) * num_envs() + k) * dim() + i];
  }
};

struct EADGNNConfig {
  std::size_t input_dim = 32;
  std::size_t num_envs = 5;
  std::size_t hidden = 16;
  std::size_t layers = 2;
  AttentionAxis attention_axis = AttentionAxis::Channels;
  std::uint64_t seed = 0;
};

class EADGNN {
 public:
  explicit EADGNN(const EADGNNConfig& config) : config_(config) {
    if (config.layers == 0) throw DimensionError("EADGNN: needs at least one layer");
    std::size_t in = config.input_dim;
    for (std::size_t l = 0; l < config.layers; ++l) {
      layers_.push_back(
          EAConvLayer::init(config.num_envs, in, config.hidden, derive_seed(config.seed, 100 + l)));
      in = config.hidden;
    }
  }

  const EADGNNConfig& config() const noexcept { return config_; }
  const std::vector<EAConvLayer>& layers() const noexcept { return layers_; }
  std::vector<EAConvLayer>& layers() noexcept { return layers_; }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& l : layers_) {
      out.push_back(l.weight);
      out.push_back(l.bias);
    }
    return out;
  }

  /// Encodes snapshots [0, time_count). Snapshots are convolved
  /// independently, then pooled causally over time.
  EnvRepresentation encode(const DynamicGraph& g, std::size_t time_count) const {
    if (!g.features) throw DimensionError("encode_graph: graph has no node features");
    if (g.features->dim() != config_.input_dim)
      throw DimensionError("encode_graph: feature dim " + std::to_string(g.features->dim()) +
                           " but model expects " + std::to_string(config_.input_dim));
    if (time_count == 0 || time_count > g.num_snapshots())
      throw DimensionError("encode_graph: bad time_count " + std::to_string(time_count));
    EnvRepresentation rep;
    std::vector<Tensor> per_time;
    per_time.reserve(time_count);
    for (std::size_t t = 0; t < time_count; ++t) {
      const auto adj = SnapshotAdjacency::from_edges(g.snapshots[t]);
      Tensor h = layer_input(g.features->snapshot(t), t);
      for (const auto& layer : layers_) {
        auto out = eaconv_forward(layer, h, adj, config_.attention_axis);
        rep.attention.push_back(out.attention);
        h = out.z_hat;
      }
      per_time.push_back(h);  // K x N x d'
    }
    const Tensor stacked = stack(per_time);  // T x K x N x d'
    rep.pre_pool = permute(stacked, {2, 0, 1, 3});
    rep.z = permute(prefix_mean_time_major(stacked), {2, 0, 1, 3});
    return rep;
  }

  EnvRepresentation encode(const DynamicGraph& g) const { return encode(g, g.num_snapshots()); }

 private:
  EADGNNConfig config_;
  std::vector<EAConvLayer> layers_;
};

}  // namespace eagle
