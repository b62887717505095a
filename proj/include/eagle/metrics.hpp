#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eagle/errors.hpp"
#include "eagle/invariant.hpp"

namespace eagle {

namespace detail {

// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i + 1;
    while (j < order.size() && x[order[j]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
    i = j;
  }
  return ranks;
}

}  // namespace detail

/// Mann-Whitney AUC: P(pos > neg) + 0.5 P(pos == neg).
inline double auc(std::span<const double> pos, std::span<const double> neg) {
  if (pos.empty() || neg.empty()) throw ValidationError("auc: positive and negative scores must be nonempty");
  std::vector<double> all(pos.begin(), pos.end());
  all.insert(all.end(), neg.begin(), neg.end());
  const auto ranks = detail::average_ranks(all);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < pos.size(); ++i) rank_sum += ranks[i];
  const double np = static_cast<double>(pos.size()), nn = static_cast<double>(neg.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

/// Channel-membership accuracy of per-node predicted invariant sets against a
/// ground-truth set, maximized over relabellings of the ground-truth channels.
inline double i_acc(const std::vector<InvariantPartition>& predicted,
                    const std::vector<std::size_t>& truth, std::size_t num_envs) {
  if (num_envs > 8) throw ValidationError("i_acc: permutation search limited to K <= 8");
  if (predicted.empty()) throw ValidationError("i_acc: no predictions");
  // Nodes are bucketed by their predicted membership mask. A relabelling
  // only changes which channels the truth occupies, so every distinct image
  // of the truth set (all masks of the same size) is scored.
  std::vector<double> histogram(std::size_t{1} << num_envs, 0.0);
  for (const auto& p : predicted) {
    unsigned mask = 0;
    for (auto k : p.invariant) mask |= 1U << k;
    histogram[mask] += 1.0;
  }
  const auto truth_size = static_cast<int>(truth.size());
  double best = 0.0;
  for (unsigned image = 0; image < (1U << num_envs); ++image) {
    if (std::popcount(image) != truth_size) continue;
    double correct = 0.0;
    for (unsigned mask = 0; mask < histogram.size(); ++mask)
      if (histogram[mask] > 0)
        correct += histogram[mask] * static_cast<double>(static_cast<int>(num_envs) - std::popcount(mask ^ image));
    best = std::max(best, correct);
  }
  return best / (static_cast<double>(predicted.size()) * static_cast<double>(num_envs));
}

/// Spearman rank correlation (Pearson correlation of average ranks).
inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ValidationError("spearman: need two equal-length series");
  const auto rx = detail::average_ranks(x);
  const auto ry = detail::average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
  friend bool operator==(const MeanStd&, const MeanStd&) = default;
};

inline MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw ValidationError("mean_std: no values");
  if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values[0]; }))
    return {values[0], 0.0};
  const double n = static_cast<double>(values.size());
  const double m = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  return {m, std::sqrt(ss / n)};
}

}  // namespace eagle
