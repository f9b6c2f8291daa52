#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "dfq/core/adam.hpp"
#include "dfq/vit/model.hpp"
#include "dfq/vit/toy_data.hpp"

namespace dfq::vit {

struct TrainOptions {
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  double lr = 2e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  /// Called after each epoch with (epoch, mean training loss).
  std::function<void(std::size_t, double)> on_epoch;
};

/// Mini-batch cross-entropy training with Adam and a cosine learning-rate
/// decay. Deterministic for a given seed. epochs == 0 returns the initialisation.
inline ParameterSet<float> train_toy_model(const LabeledImages& data, const ModelConfig& config,
                                           const TrainOptions& opt) {
  config.validate();
  const Shape& s = data.images.shape();
  if (s.size() != 4 || s[1] != config.channels || s[2] != config.image_side || s[3] != config.image_side)
    throw ConfigError("dataset images " + shape_string(s) + " do not match model geometry");
  for (int label : data.labels)
    if (label < 0 || static_cast<std::size_t>(label) >= config.num_classes)
      throw ConfigError("dataset label " + std::to_string(label) + " outside model classes");
  if (opt.batch_size == 0) throw ConfigError("batch_size must be positive");

  ParameterSet<float> params = init_parameters<float>(config, opt.seed);
  std::vector<Adam> optim;
  params.for_each([&](const std::string&, const Tensor<float>& t, bool) {
    optim.emplace_back(t.size(), AdamOptions{opt.lr});
  });

  std::mt19937_64 rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t per = data.images.size() / data.size();
  const std::size_t steps_per_epoch = (data.size() + opt.batch_size - 1) / opt.batch_size;
  const double total_steps = static_cast<double>(opt.epochs * steps_per_epoch);
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    for (std::size_t first = 0; first < data.size(); first += opt.batch_size) {
      const std::size_t n = std::min(opt.batch_size, data.size() - first);
      Tensor<float> batch(Shape{n, s[1], s[2], s[3]});
      std::vector<int> labels(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(data.images.ptr() + order[first + i] * per, per, batch.ptr() + i * per);
        labels[i] = data.labels[order[first + i]];
      }
      auto vars = as_vars(params, true);
      auto result = forward(config, vars, Var<float>::leaf(std::move(batch)));
      auto loss = ops::cross_entropy(result.logits, std::span<const int>(labels));
      loss.backward();
      loss_sum += loss.value()[0] * static_cast<double>(n);

      const double lr_scale = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps));
      std::vector<const Var<float>*> flat;
      vars.for_each([&](const std::string&, const Var<float>& v, bool) { flat.push_back(&v); });
      std::size_t i = 0;
      params.for_each([&](const std::string&, Tensor<float>& t, bool is_weight) {
        const auto& g = flat[i]->grad();
        if (opt.weight_decay > 0 && is_weight)
          for (auto& w : t.data()) w *= static_cast<float>(1.0 - opt.lr * lr_scale * opt.weight_decay);
        optim[i].step(t.data(), g.data(), lr_scale);
        ++i;
      });
      ++step;
    }
    if (opt.on_epoch) opt.on_epoch(epoch, loss_sum / static_cast<double>(data.size()));
  }
  return params;
}

/// Class predictions (argmax of logits, ties to the lower index), batched.
template <typename F>
std::vector<int> predict_batched(const Tensor<float>& images, std::size_t batch_size, F&& logits_of) {
  const std::size_t count = images.dim(0);
  std::vector<int> out;
  out.reserve(count);
  for (std::size_t first = 0; first < count; first += batch_size) {
    const std::size_t n = std::min(batch_size, count - first);
    const Tensor<float> logits = logits_of(slice_images(images, first, n));
    const std::size_t C = logits.dim(1);
    for (std::size_t b = 0; b < n; ++b) {
      const float* row = logits.ptr() + b * C;
      out.push_back(static_cast<int>(std::max_element(row, row + C) - row));
    }
  }
  return out;
}

}  // namespace dfq::vit
