#pragma once

#include <cmath>
#include <span>

#include <nlohmann/json.hpp>

#include "dfq/core/ops.hpp"

namespace dfq::priors {

/// Balance coefficients of the generation objective.
struct GenLossWeights {
  double alpha1 = 1.0;   // one-hot
  double alpha2 = 0.05;  // total variation

  void validate() const {
    if (!(alpha1 >= 0.0) || !(alpha2 >= 0.0)) throw ConfigError("loss weights must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const GenLossWeights& w) { j = {{"alpha1", w.alpha1}, {"alpha2", w.alpha2}}; }
inline void from_json(const nlohmann::json& j, GenLossWeights& w) {
  j.at("alpha1").get_to(w.alpha1);
  j.at("alpha2").get_to(w.alpha2);
}

/// Batch-mean cross-entropy of the model's prediction against the target classes.
template <typename T>
Var<T> one_hot_loss(const Var<T>& logits, std::span<const int> targets) {
  return ops::cross_entropy(logits, targets);
}

/// Anisotropic total variation with forward differences, averaged over batch
/// and channels and normalised by the pixel count. image: [B, C, H, W].
template <typename T>
Var<T> tv_loss(const Var<T>& image) {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[2] < 2 || s[3] < 2) throw ConfigError("tv_loss needs [B, C, H>=2, W>=2], got " + shape_string(s));
  const std::size_t planes = s[0] * s[1], H = s[2], W = s[3];
  const T norm = T(1) / static_cast<T>(planes * H * W);
  const T* x = image.value().ptr();
  T total = 0;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t c = 0; c < W; ++c) {
        const std::size_t i = (p * H + y) * W + c;
        if (c + 1 < W) total += std::abs(x[i + 1] - x[i]);
        if (y + 1 < H) total += std::abs(x[i + W] - x[i]);
      }
  auto sign = [](T v) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); };
  return Var<T>::make(Tensor<T>(Shape{}, total * norm), {image}, [image, planes, H, W, norm, sign](const Tensor<T>& g) {
    const T* x = image.value().ptr();
    auto& gx = image.grad_buffer();
    const T k = g[0] * norm;
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t c = 0; c < W; ++c) {
          const std::size_t i = (p * H + y) * W + c;
          if (c + 1 < W) {
            const T s = k * sign(x[i + 1] - x[i]);
            gx[i + 1] += s;
            gx[i] -= s;
          }
          if (y + 1 < H) {
            const T s = k * sign(x[i + W] - x[i]);
            gx[i + W] += s;
            gx[i] -= s;
          }
        }
  });
}

/// L_G = pse + alpha1 * oh + alpha2 * tv.
inline double total_generation_loss(double pse, double oh, double tv, const GenLossWeights& w) {
  return pse + w.alpha1 * oh + w.alpha2 * tv;
}

template <typename T>
Var<T> total_generation_loss(const Var<T>& pse, const Var<T>& oh, const Var<T>& tv, const GenLossWeights& w) {
  return ops::add(ops::add(pse, ops::scale(oh, static_cast<T>(w.alpha1))), ops::scale(tv, static_cast<T>(w.alpha2)));
}

}  // namespace dfq::priors
