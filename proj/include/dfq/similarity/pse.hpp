#pragma once

#include <vector>

#include "dfq/core/ops.hpp"
#include "dfq/similarity/kde.hpp"
#include "dfq/similarity/similarity.hpp"
#include "dfq/vit/model.hpp"

namespace dfq::similarity {

/// Per-image patch-similarity entropies of one traced layer: [B, H, N, d] -> [B].
template <typename T>
Var<T> layer_entropy(const Var<T>& head_outputs, const EntropyOptions& opt = {}) {
  const std::size_t N = head_outputs.shape().at(2);
  const auto idx = upper_triangle_indices(N, opt.max_points, opt.subsample_seed);
  return kde_entropy(gather_entries(cosine_similarity(head_outputs), idx), opt);
}

/// Patch-similarity entropy loss: minus the sum over layers of the
/// batch-averaged differential entropy. Differentiable through the trace.
template <typename T>
Var<T> pse_loss(const vit::AttentionTrace<T>& trace, const EntropyOptions& opt = {}) {
  if (trace.layers.empty()) throw ContractError("pse_loss needs a non-empty attention trace");
  Var<T> total;
  for (const auto& layer : trace.layers) {
    auto h = ops::mean(layer_entropy(layer, opt));
    total = total.defined() ? ops::add(total, h) : h;
  }
  return ops::scale(total, T(-1));
}

/// Batch-mean entropy of each layer, as plain numbers.
template <typename T>
std::vector<double> layer_entropies(const vit::AttentionTrace<T>& trace, const EntropyOptions& opt = {}) {
  std::vector<double> out;
  for (const auto& layer : trace.layers) {
    const auto e = layer_entropy(Var<T>::leaf(layer.value()), opt);
    double s = 0;
    for (T v : e.value().data()) s += static_cast<double>(v);
    out.push_back(s / static_cast<double>(e.size()));
  }
  return out;
}

}  // namespace dfq::similarity
