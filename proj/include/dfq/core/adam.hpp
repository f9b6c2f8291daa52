#pragma once

#include <cmath>
#include <span>
#include <vector>

namespace dfq {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment update for one flat parameter buffer.
class Adam {
 public:
  explicit Adam(std::size_t size = 0, AdamOptions opt = {}) : opt_(opt), m_(size, 0.0), v_(size, 0.0) {}

  const AdamOptions& options() const noexcept { return opt_; }
  long steps() const noexcept { return t_; }

  /// In-place update; `lr_scale` multiplies the configured rate for this step.
  template <typename T>
  void step(std::span<T> params, std::span<const T> grads, double lr_scale = 1.0) {
    if (m_.size() != params.size()) {
      m_.assign(params.size(), 0.0);
      v_.assign(params.size(), 0.0);
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    const double lr = opt_.lr * lr_scale;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grads.empty() ? 0.0 : static_cast<double>(grads[i]);
      m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
      v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g * g;
      const double mhat = m_[i] / bc1, vhat = v_[i] / bc2;
      params[i] = static_cast<T>(static_cast<double>(params[i]) - lr * mhat / (std::sqrt(vhat) + opt_.eps));
    }
  }

 private:
  AdamOptions opt_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

}  // namespace dfq
