#pragma once

// Invariant pattern recognition: per-node channel variance over time, an
// exact balanced-partition subset-sum DP on quantized variances, and the
// invariant/variant channel split derived from it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "eagle/ea_dgnn.hpp"
#include "eagle/errors.hpp"

namespace eagle {

/// var[k] for one node: per-dimension population variance over time,
/// averaged over the d' dimensions of channel k.
using VarianceProfile = std::vector<double>;

inline VarianceProfile channel_variance(const EnvRepresentation& rep, std::size_t v,
                                        std::size_t time_count) {
  const std::size_t T = std::min(time_count, rep.num_times());
  const std::size_t K = rep.num_envs(), d = rep.dim();
  if (T == 0) throw DimensionError("channel_variance: need at least one time step");
  const std::size_t T_all = rep.num_times();
  const double* z = rep.z.data().data() + v * T_all * K * d;
  auto at = [&](std::size_t t, std::size_t k, std::size_t i) { return z[(t * K + k) * d + i]; };
  VarianceProfile out(K, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      double m = 0.0;
      for (std::size_t t = 0; t < T; ++t) m += at(t, k, i);
      m /= static_cast<double>(T);
      double s = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        const double c = at(t, k, i) - m;
        s += c * c;
      }
      acc += s / static_cast<double>(T);
    }
    out[k] = acc / static_cast<double>(d);
  }
  return out;
}

inline VarianceProfile channel_variance(const EnvRepresentation& rep, std::size_t v) {
  return channel_variance(rep, v, rep.num_times());
}

inline constexpr std::int64_t kDefaultQuantization = 1000;

inline std::vector<std::uint64_t> quantize(const VarianceProfile& profile, std::int64_t scale) {
  if (scale <= 0) throw ValidationError("quantization scale must be positive");
  std::vector<std::uint64_t> q;
  q.reserve(profile.size());
  for (double v : profile) {
    if (!(v >= 0.0) || !std::isfinite(v))
      throw ValidationError("variance profile entries must be finite and nonnegative");
    q.push_back(static_cast<std::uint64_t>(std::llround(v * static_cast<double>(scale))));
  }
  return q;
}

struct DeltaResult {
  double delta = 0.0;                 // (sum q - 2 j) / Q
  std::vector<std::size_t> subset;    // channel indices summing to j
  std::uint64_t quantized_total = 0;  // sum q
  std::uint64_t best_sum = 0;         // j
};

namespace detail {

// Fixed-width bitset row for the reachable-sum table.
class BitRow {
 public:
  explicit BitRow(std::size_t bits) : bits_(bits), words_((bits + 63) / 64, 0) {}
  bool test(std::size_t i) const { return (words_[i / 64] >> (i % 64)) & 1U; }
  void set(std::size_t i) { words_[i / 64] |= std::uint64_t{1} << (i % 64); }

  /// *this = prev | (prev << shift), truncated to the row width.
  void assign_shift_or(const BitRow& prev, std::size_t shift) {
    const std::size_t n = words_.size();
    const std::size_t ws = shift / 64, bs = shift % 64;
    for (std::size_t w = 0; w < n; ++w) {
      std::uint64_t shifted = 0;
      if (w >= ws) {
        shifted = prev.words_[w - ws] << bs;
        if (bs != 0 && w >= ws + 1) shifted |= prev.words_[w - ws - 1] >> (64 - bs);
      }
      words_[w] = prev.words_[w] | shifted;
    }
    const std::size_t tail = bits_ % 64;
    if (tail != 0) words_.back() &= (std::uint64_t{1} << tail) - 1;
  }

 private:
  std::size_t bits_;
  std::vector<std::uint64_t> words_;
};

}  // namespace detail

/// Reachable-sum DP I(i, j) over the quantized variances for
/// j = 0..floor(sum/2), then the largest reachable j. The returned subset is
/// recovered by backtracking from the last channel, taking a channel
/// whenever the remaining sum stays reachable without it.
inline DeltaResult dp_delta(const VarianceProfile& profile,
                            std::int64_t scale = kDefaultQuantization) {
  const auto q = quantize(profile, scale);
  const std::size_t K = q.size();
  const std::uint64_t total = std::accumulate(q.begin(), q.end(), std::uint64_t{0});
  const std::size_t half = static_cast<std::size_t>(total / 2);

  std::vector<detail::BitRow> table;
  table.reserve(K + 1);
  table.emplace_back(half + 1);
  table[0].set(0);
  for (std::size_t i = 1; i <= K; ++i) {
    table.emplace_back(half + 1);
    if (q[i - 1] > half)
      table[i].assign_shift_or(table[i - 1], half + 1);  // item never fits
    else
      table[i].assign_shift_or(table[i - 1], static_cast<std::size_t>(q[i - 1]));
  }
  std::size_t j = half;
  while (!table[K].test(j)) --j;  // I(K, 0) is always true

  DeltaResult r;
  r.quantized_total = total;
  r.best_sum = j;
  r.delta = static_cast<double>(total - 2 * static_cast<std::uint64_t>(j)) / static_cast<double>(scale);
  std::size_t rem = j;
  for (std::size_t i = K; i > 0; --i) {
    const auto w = static_cast<std::size_t>(q[i - 1]);
    if (w <= rem && table[i - 1].test(rem - w)) {
      r.subset.push_back(i - 1);
      rem -= w;
    }
  }
  std::reverse(r.subset.begin(), r.subset.end());
  return r;
}

/// min over all 2^K subsets of |sum(S) - sum(complement)| / Q.
inline double brute_force_delta(const VarianceProfile& profile,
                                std::int64_t scale = kDefaultQuantization) {
  if (profile.size() > 20) throw ValidationError("brute_force_delta: K > 20");
  const auto q = quantize(profile, scale);
  const std::int64_t total =
      static_cast<std::int64_t>(std::accumulate(q.begin(), q.end(), std::uint64_t{0}));
  std::int64_t best = std::numeric_limits<std::int64_t>::max();
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << q.size()); ++mask) {
    std::int64_t s = 0;
    for (std::size_t k = 0; k < q.size(); ++k)
      if (mask >> k & 1U) s += static_cast<std::int64_t>(q[k]);
    best = std::min(best, std::abs(total - 2 * s));
  }
  return static_cast<double>(best) / static_cast<double>(scale);
}

enum class PartitionRule {
  Threshold,  // var[k] <= mean(var) - delta/2
  Subset,     // the side of the DP partition with the lower mean variance
};

struct InvariantPartition {
  double delta = 0.0;
  std::vector<std::size_t> invariant;
  std::vector<std::size_t> variant;

  bool is_invariant(std::size_t k) const {
    return std::find(invariant.begin(), invariant.end(), k) != invariant.end();
  }
};

/// Splits channels into invariant/variant sets. An empty invariant set
/// falls back to the minimum-variance channel.
inline InvariantPartition partition(const VarianceProfile& profile, const DeltaResult& dp,
                                    PartitionRule rule = PartitionRule::Threshold) {
  const std::size_t K = profile.size();
  InvariantPartition p;
  p.delta = dp.delta;
  std::vector<bool> inv(K, false);
  if (rule == PartitionRule::Threshold) {
    const double total = std::accumulate(profile.begin(), profile.end(), 0.0);
    const double cutoff = total / static_cast<double>(K) - dp.delta / 2.0;
    const double slack = 1e-12 * std::max(1.0, std::abs(cutoff));
    for (std::size_t k = 0; k < K; ++k) inv[k] = profile[k] <= cutoff + slack;
  } else {
    std::vector<bool> in_subset(K, false);
    for (auto k : dp.subset) in_subset[k] = true;
    double sum_in = 0, sum_out = 0;
    std::size_t n_in = 0;
    for (std::size_t k = 0; k < K; ++k) {
      (in_subset[k] ? sum_in : sum_out) += profile[k];
      n_in += in_subset[k] ? 1 : 0;
    }
    const std::size_t n_out = K - n_in;
    bool take_subset;
    if (n_in == 0 || n_out == 0)
      take_subset = n_in > 0;
    else
      take_subset = sum_in / static_cast<double>(n_in) <= sum_out / static_cast<double>(n_out);
    for (std::size_t k = 0; k < K; ++k) inv[k] = in_subset[k] == take_subset;
  }
  if (K > 0 && std::none_of(inv.begin(), inv.end(), [](bool b) { return b; }))
    inv[static_cast<std::size_t>(std::min_element(profile.begin(), profile.end()) - profile.begin())] = true;
  for (std::size_t k = 0; k < K; ++k) (inv[k] ? p.invariant : p.variant).push_back(k);
  return p;
}

/// Runs variance -> DP -> partition for every node over times [0, time_count).
inline std::vector<InvariantPartition> recognize_patterns(const EnvRepresentation& rep,
                                                          std::size_t time_count,
                                                          std::int64_t scale = kDefaultQuantization,
                                                          PartitionRule rule = PartitionRule::Threshold) {
  std::vector<InvariantPartition> out;
  out.reserve(rep.num_nodes());
  for (std::size_t v = 0; v < rep.num_nodes(); ++v) {
    const auto profile = channel_variance(rep, v, time_count);
    out.push_back(partition(profile, dp_delta(profile, scale), rule));
  }
  return out;
}

}  // namespace eagle
