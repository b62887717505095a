#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "eagle/tensor.hpp"

namespace eagle {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers, one per parameter, plus the step count.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t t = 0;
};

/// Bias-corrected Adam over a fixed parameter list. `step()` consumes and
/// clears the gradients.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options = {})
      : params_(std::move(params)), options_(options) {
    for (const auto& p : params_) {
      state_.m.emplace_back(p.size(), 0.0);
      state_.v.emplace_back(p.size(), 0.0);
    }
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (!params_[i].has_grad())
        throw std::logic_error("adam_step: parameter " + std::to_string(i) + " has no gradient");
    ++state_.t;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(state_.t));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(state_.t));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto value = params_[i].mutable_data();
      const auto grad = params_[i].grad();
      auto& m = state_.m[i];
      auto& v = state_.v[i];
      for (std::size_t j = 0; j < value.size(); ++j) {
        m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * grad[j];
        v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * grad[j] * grad[j];
        const double m_hat = m[j] / bc1;
        const double v_hat = v[j] / bc2;
        value[j] -= options_.lr * m_hat / (std::sqrt(v_hat) + options_.eps);
      }
    }
    zero_grad();
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const std::vector<Tensor>& params() const noexcept { return params_; }
  const AdamOptions& options() const noexcept { return options_; }
  const AdamState& state() const noexcept { return state_; }
  AdamState& state() noexcept { return state_; }

 private:
  std::vector<Tensor> params_;
  AdamOptions options_;
  AdamState state_;
};

}  // namespace eagle
