#pragma once

// Environment-aware conditional VAE over channel embeddings. Samples are
// d'-vectors z labelled by a one-hot (channel, time) multi-label y of
// length K*T. Encoder q(e|z,y), conditional prior p(e|y) and decoder
// p(z|y,e) are fully connected nets with LeakyReLU hidden layers.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eagle/ea_dgnn.hpp"
#include "eagle/errors.hpp"
#include "eagle/rng.hpp"
#include "eagle/tensor.hpp"

namespace eagle {

/// One-hot of length K*T with the 1 at k*T + t.
inline std::vector<double> build_multilabel(std::size_t k, std::size_t t, std::size_t num_envs,
                                            std::size_t num_times) {
  if (k >= num_envs || t >= num_times)
    throw ValidationError("build_multilabel: (k=" + std::to_string(k) + ", t=" + std::to_string(t) +
                          ") outside K=" + std::to_string(num_envs) +
                          ", T=" + std::to_string(num_times));
  std::vector<double> y(num_envs * num_times, 0.0);
  y[k * num_times + t] = 1.0;
  return y;
}

/// Inverse of build_multilabel's layout: index -> (k, t).
inline std::pair<std::size_t, std::size_t> decode_multilabel(std::size_t index,
                                                             std::size_t num_times) {
  return {index / num_times, index % num_times};
}

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out

  static Linear init(std::size_t in, std::size_t out, std::uint64_t seed) {
    Rng rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    return {Tensor::uniform({in, out}, -bound, bound, rng, true),
            Tensor::uniform({1, out}, -bound, bound, rng, true)};
  }

  Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }
};

/// Linear layers with LeakyReLU between them and a linear output.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t in, std::size_t hidden, std::size_t depth, std::size_t out, std::uint64_t seed) {
    std::size_t width = in;
    for (std::size_t i = 0; i < depth; ++i) {
      layers_.push_back(Linear::init(width, hidden, derive_seed(seed, i)));
      width = hidden;
    }
    layers_.push_back(Linear::init(width, out, derive_seed(seed, depth)));
  }

  Tensor operator()(Tensor x) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      x = layers_[i](x);
      if (i + 1 < layers_.size()) x = leaky_relu(x);
    }
    return x;
  }

  std::vector<Linear>& layers() noexcept { return layers_; }
  const std::vector<Linear>& layers() const noexcept { return layers_; }

  void append_parameters(std::vector<Tensor>& out) const {
    for (const auto& l : layers_) {
      out.push_back(l.weight);
      out.push_back(l.bias);
    }
  }

 private:
  std::vector<Linear> layers_;
};

struct DiagGaussian {
  Tensor mean;    // B x d_e
  Tensor logvar;  // B x d_e
};

struct ECVAEConfig {
  std::size_t sample_dim = 16;  // d'
  std::size_t num_envs = 5;     // K
  std::size_t num_times = 6;    // T of the multi-labels
  std::size_t latent = 16;
  std::size_t hidden = 64;
  std::size_t depth = 2;
  std::uint64_t seed = 0;

  std::size_t label_dim() const { return num_envs * num_times; }
};

class ECVAE {
 public:
  explicit ECVAE(const ECVAEConfig& config)
      : config_(config),
        encoder_(config.sample_dim + config.label_dim(), config.hidden, config.depth,
                 2 * config.latent, derive_seed(config.seed, 1)),
        prior_(config.label_dim(), config.hidden, config.depth, 2 * config.latent,
               derive_seed(config.seed, 2)),
        decoder_(config.latent + config.label_dim(), config.hidden, config.depth,
                 config.sample_dim, derive_seed(config.seed, 3)) {}

  const ECVAEConfig& config() const noexcept { return config_; }

  /// Posterior q(e | z, y) from the concatenation [z || y].
  DiagGaussian encode(const Tensor& z, const Tensor& y) const {
    check_batch(z, config_.sample_dim, "encode: z");
    check_batch(y, config_.label_dim(), "encode: y");
    if (z.dim(0) != y.dim(0)) throw DimensionError("encode: z and y batch sizes differ");
    return split(encoder_(concat({z, y}, 1)));
  }

  /// Conditional prior p(e | y).
  DiagGaussian prior(const Tensor& y) const {
    check_batch(y, config_.label_dim(), "prior: y");
    return split(prior_(y));
  }

  /// Mean of p(z | y, e).
  Tensor decode(const Tensor& e, const Tensor& y) const {
    check_batch(e, config_.latent, "decode: e");
    check_batch(y, config_.label_dim(), "decode: y");
    return decoder_(concat({e, y}, 1));
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    encoder_.append_parameters(out);
    prior_.append_parameters(out);
    decoder_.append_parameters(out);
    return out;
  }

  Mlp& encoder_net() noexcept { return encoder_; }
  Mlp& prior_net() noexcept { return prior_; }
  Mlp& decoder_net() noexcept { return decoder_; }

 private:
  static void check_batch(const Tensor& x, std::size_t width, const char* what) {
    if (x.rank() != 2 || x.dim(1) != width)
      throw DimensionError(std::string(what) + " has shape " + shape_str(x.shape()) +
                           ", expected B x " + std::to_string(width));
  }

  DiagGaussian split(const Tensor& out) const {
    return {narrow(out, 1, 0, config_.latent), narrow(out, 1, config_.latent, config_.latent)};
  }

  ECVAEConfig config_;
  Mlp encoder_, prior_, decoder_;
};

/// e = mean + exp(logvar / 2) * eps
inline Tensor reparameterize(const Tensor& mean, const Tensor& logvar, const Tensor& eps) {
  if (mean.shape() != logvar.shape() || mean.shape() != eps.shape())
    throw DimensionError("reparameterize: shape mismatch");
  return add(mean, mul(exp(scale(logvar, 0.5)), eps));
}

/// KL(q || p) of diagonal Gaussians, summed over dimensions: B-vector.
inline Tensor gaussian_kl(const DiagGaussian& q, const DiagGaussian& p) {
  const Tensor var_ratio = exp(sub(q.logvar, p.logvar));
  const Tensor mahalanobis = div(square(sub(q.mean, p.mean)), exp(p.logvar));
  const Tensor terms = sub(add(var_ratio, mahalanobis), add_scalar(sub(q.logvar, p.logvar), 1.0));
  return scale(sum(terms, 1), 0.5);
}

struct ECVAELoss {
  Tensor total;
  Tensor kl;     // batch mean
  Tensor recon;  // mean squared error
};

/// Batch-mean analytic KL plus reconstruction MSE from one reparameterized
/// draw per sample.
inline ECVAELoss ecvae_loss(const ECVAE& model, const Tensor& z, const Tensor& y,
                            const Tensor& eps) {
  if (z.rank() != 2 || z.dim(0) == 0) throw DimensionError("ecvae_loss: empty batch");
  const auto posterior = model.encode(z, y);
  const auto conditional_prior = model.prior(y);
  const Tensor e = reparameterize(posterior.mean, posterior.logvar, eps);
  const Tensor recon = mean(square(sub(model.decode(e, y), z)));
  const Tensor kl = mean(gaussian_kl(posterior, conditional_prior));
  return {add(kl, recon), kl, recon};
}

/// Flat store of labelled environment samples.
class EnvSampleSet {
 public:
  EnvSampleSet() = default;
  explicit EnvSampleSet(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return env_.size(); }
  bool empty() const noexcept { return env_.empty(); }

  void reserve(std::size_t n) {
    values_.reserve(n * dim_);
    env_.reserve(n);
    time_.reserve(n);
  }

  void push(std::span<const double> z, std::size_t k, std::size_t t) {
    if (z.size() != dim_) throw DimensionError("EnvSampleSet::push: wrong sample width");
    values_.insert(values_.end(), z.begin(), z.end());
    env_.push_back(static_cast<std::uint32_t>(k));
    time_.push_back(static_cast<std::uint32_t>(t));
  }

  std::span<const double> sample(std::size_t i) const {
    return std::span<const double>(values_).subspan(i * dim_, dim_);
  }
  std::size_t env(std::size_t i) const { return env_[i]; }
  std::size_t time(std::size_t i) const { return time_[i]; }

  /// B x d' tensor and B x K*T labels for the given sample indices.
  std::pair<Tensor, Tensor> batch(const std::vector<std::size_t>& idx, std::size_t num_envs,
                                  std::size_t num_times) const {
    std::vector<double> zs(idx.size() * dim_), ys(idx.size() * num_envs * num_times, 0.0);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto s = sample(idx[b]);
      std::copy(s.begin(), s.end(), zs.begin() + static_cast<std::ptrdiff_t>(b * dim_));
      ys[b * num_envs * num_times + env_[idx[b]] * num_times + time_[idx[b]]] = 1.0;
    }
    return {Tensor::from({idx.size(), dim_}, std::move(zs)),
            Tensor::from({idx.size(), num_envs * num_times}, std::move(ys))};
  }

 private:
  std::size_t dim_ = 0;
  std::vector<double> values_;
  std::vector<std::uint32_t> env_, time_;
};

/// Observed (S_ob) and generated (S_ge) samples used for interventions.
struct EnvSampleLibrary {
  EnvSampleSet observed;
  EnvSampleSet generated;

  bool empty() const noexcept { return observed.empty() && generated.empty(); }
};

/// Every (v, k, t) slice of the representation as a detached sample labelled
/// (k, t); N*K*T samples in total.
inline EnvSampleSet build_observed(const EnvRepresentation& rep) {
  const std::size_t N = rep.num_nodes(), T = rep.num_times(), K = rep.num_envs(), d = rep.dim();
  EnvSampleSet set(d);
  set.reserve(N * K * T);
  const auto z = rep.z.data();
  for (std::size_t v = 0; v < N; ++v)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t k = 0; k < K; ++k)
        set.push(z.subspan(((v * T + t) * K + k) * d, d), k, t);
  return set;
}

/// Draws (k, t) uniformly, e ~ p(e|y), and decodes. No graph is recorded,
/// so generated samples are constants.
inline EnvSampleSet generate_library(const ECVAE& model, std::size_t count, Rng& rng,
                                     std::size_t chunk = 4096) {
  if (count == 0) throw ValidationError("generate_library: count must be positive");
  const auto& cfg = model.config();
  NoGradGuard no_grad;
  EnvSampleSet out(cfg.sample_dim);
  out.reserve(count);
  for (std::size_t start = 0; start < count; start += chunk) {
    const std::size_t b = std::min(chunk, count - start);
    std::vector<std::size_t> ks(b), ts(b);
    std::vector<double> ys(b * cfg.label_dim(), 0.0);
    for (std::size_t i = 0; i < b; ++i) {
      ks[i] = static_cast<std::size_t>(rng.uniform_int(cfg.num_envs));
      ts[i] = static_cast<std::size_t>(rng.uniform_int(cfg.num_times));
      ys[i * cfg.label_dim() + ks[i] * cfg.num_times + ts[i]] = 1.0;
    }
    const Tensor y = Tensor::from({b, cfg.label_dim()}, std::move(ys));
    const auto p = model.prior(y);
    const Tensor eps = Tensor::normal({b, cfg.latent}, 0.0, 1.0, rng);
    const Tensor z = model.decode(reparameterize(p.mean, p.logvar, eps), y);
    const auto zd = z.data();
    for (std::size_t i = 0; i < b; ++i) out.push(zd.subspan(i * cfg.sample_dim, cfg.sample_dim), ks[i], ts[i]);
  }
  return out;
}

}  // namespace eagle
