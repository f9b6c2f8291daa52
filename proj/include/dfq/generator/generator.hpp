#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "dfq/core/adam.hpp"
#include "dfq/priors/priors.hpp"
#include "dfq/similarity/pse.hpp"
#include "dfq/vit/model.hpp"

namespace dfq::gen {

struct GenConfig {
  std::size_t batch_size = 32;
  std::size_t steps = 500;
  double lr = 0.05;
  std::uint64_t seed = 0;
  priors::GenLossWeights weights;
  bool use_pse = true;          // false drops the entropy term (ablation rows without it)
  std::vector<int> labels;      // empty: drawn uniformly per seed
  similarity::EntropyOptions entropy;

  void validate() const {
    if (batch_size == 0) throw ConfigError("generation batch size must be at least 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("generation learning rate must be finite and >= 0");
    weights.validate();
    if (!labels.empty() && labels.size() != batch_size) throw ConfigError("one target label per generated image");
  }
};

struct LossRecord {
  double total = 0, pse = 0, one_hot = 0, tv = 0;
};

template <typename T>
struct GeneratedBatch {
  Tensor<T> images;  // [B, C, S, S], normalised-input domain
  std::vector<int> labels;
  std::vector<LossRecord> loss_history;
  std::uint64_t seed = 0;
  GenConfig config;
};

/// I.i.d. standard-normal pixels, deterministic per seed.
template <typename T>
Tensor<T> init_noise(const GenConfig& config, const vit::ModelConfig& model) {
  Tensor<T> images(Shape{config.batch_size, model.channels, model.image_side, model.image_side});
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : images.data()) v = static_cast<T>(normal(rng));
  return images;
}

/// Target classes: the configured list, or uniform draws from a seed-derived stream.
inline std::vector<int> target_labels(const GenConfig& config, std::size_t num_classes) {
  if (!config.labels.empty()) {
    for (int c : config.labels)
      if (c < 0 || static_cast<std::size_t>(c) >= num_classes) throw ConfigError("target label out of range");
    return config.labels;
  }
  std::mt19937_64 rng(config.seed ^ 0x5bd1e995ULL);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(num_classes) - 1);
  std::vector<int> out(config.batch_size);
  for (auto& c : out) c = pick(rng);
  return out;
}

/// The generation objective on one batch. Returns the differentiable total and
/// fills `record` with the component values.
template <typename T>
Var<T> generation_loss(const vit::Model<T>& model, const Var<T>& image, std::span<const int> labels,
                       const GenConfig& config, LossRecord& record) {
  auto fwd = vit::forward_with_trace(model, image, true);
  vit::AttentionTrace<T> trace = *fwd.trace;
  if (!config.use_pse)  // record the value without back-propagating through it
    for (auto& layer : trace.layers) layer = Var<T>::leaf(layer.value());
  auto pse = similarity::pse_loss(trace, config.entropy);
  auto oh = priors::one_hot_loss(fwd.logits, labels);
  auto tv = priors::tv_loss(image);
  record.pse = static_cast<double>(pse.value()[0]);
  record.one_hot = static_cast<double>(oh.value()[0]);
  record.tv = static_cast<double>(tv.value()[0]);
  const double pse_w = config.use_pse ? 1.0 : 0.0;
  record.total = priors::total_generation_loss(pse_w * record.pse, record.one_hot, record.tv, config.weights);
  for (const auto& [name, v] : {std::pair{"L_PSE", record.pse}, {"L_OH", record.one_hot}, {"L_TV", record.tv}})
    if (!std::isfinite(v)) throw NumericalError(std::string("generation diverged: ") + name + " is not finite");
  if (!config.use_pse) pse = Var<T>::leaf(Tensor<T>(Shape{}, T(0)));
  return priors::total_generation_loss(pse, oh, tv, config.weights);
}

/// Stateful Stage-1 loop: Gaussian noise optimised against the generation
/// objective by Adam on the pixels. The model is never modified.
template <typename T>
class SampleGenerator {
 public:
  SampleGenerator(const vit::Model<T>& model, GenConfig config)
      : model_(model), config_(std::move(config)) {
    if (!model_.loaded()) throw StateError("sample generation needs a loaded model");
    config_.validate();
    images_ = init_noise<T>(config_, model_.config());
    labels_ = target_labels(config_, model_.config().num_classes);
    adam_ = Adam(images_.size(), AdamOptions{config_.lr});
  }

  const Tensor<T>& images() const noexcept { return images_; }
  const std::vector<int>& labels() const noexcept { return labels_; }

  /// One forward/backward pass and one pixel update.
  LossRecord step() {
    auto image = Var<T>::leaf(images_, true);
    LossRecord rec;
    auto loss = generation_loss(model_, image, labels_, config_, rec);
    loss.backward();
    adam_.step(images_.data(), image.grad().data());
    return rec;
  }

  GeneratedBatch<T> run() {
    GeneratedBatch<T> out;
    for (std::size_t t = 0; t < config_.steps; ++t) out.loss_history.push_back(step());
    out.images = images_;
    out.labels = labels_;
    out.seed = config_.seed;
    out.config = config_;
    return out;
  }

 private:
  const vit::Model<T>& model_;
  GenConfig config_;
  Tensor<T> images_;
  std::vector<int> labels_;
  Adam adam_;
};

/// Runs `steps` generation steps from fresh noise.
template <typename T>
GeneratedBatch<T> generate_samples(const vit::Model<T>& model, const GenConfig& config) {
  return SampleGenerator<T>(model, config).run();
}

/// A pure-noise batch with labels, as produced by zero generation steps.
template <typename T>
GeneratedBatch<T> noise_batch(const vit::ModelConfig& model, GenConfig config) {
  config.validate();
  GeneratedBatch<T> out;
  out.images = init_noise<T>(config, model);
  out.labels = target_labels(config, model.num_classes);
  out.seed = config.seed;
  config.steps = 0;
  out.config = config;
  return out;
}

}  // namespace dfq::gen
