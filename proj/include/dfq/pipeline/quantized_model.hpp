#pragma once

#include <chrono>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfq/quant/observer.hpp"
#include "dfq/vit/model.hpp"
#include "dfq/vit/toy_data.hpp"
#include "dfq/vit/trainer.hpp"

namespace dfq::pipeline {

using quant::QuantParams;
using QuantTable = std::map<std::string, QuantParams>;

struct QuantConfig {
  int weight_bits = 8;
  int act_bits = 8;
  quant::Strategy strategy = quant::Strategy::minmax;
  quant::ObserverOptions observer;
  bool quantize_attention_probs = false;
  std::size_t calib_batch = 0;  // images per observe() call; 0 = all samples at once

  bool weights_bypassed() const noexcept { return weight_bits >= quant::kBypassBits; }
  bool acts_bypassed() const noexcept { return act_bits >= quant::kBypassBits; }
};

/// Activation-site names of a model in forward order.
inline std::vector<vit::Site> activation_sites(const vit::ModelConfig& config, bool with_probs) {
  using vit::SiteKind;
  std::vector<vit::Site> out;
  for (std::size_t l = 0; l < config.num_layers; ++l)
    for (SiteKind k : {SiteKind::qkv_input, SiteKind::query, SiteKind::key, SiteKind::value, SiteKind::attn_probs,
                       SiteKind::proj_input, SiteKind::fc1_input, SiteKind::fc2_input})
      if (k != SiteKind::attn_probs || with_probs) out.push_back({l, k});
  return out;
}

/// A model whose MSA/MLP matmul weights are fake-quantised (symmetric MinMax)
/// and whose matmul inputs carry activation observers / quantisers.
template <typename T>
class QuantizedModel {
 public:
  QuantizedModel(const vit::Model<T>& fp, QuantConfig config) : config_(config) {
    if (!fp.loaded()) throw StateError("cannot wrap an unloaded model");
    if (config_.weight_bits < 2 || config_.act_bits < 2) throw ConfigError("bit widths must be at least 2");
    // validates the observer options up front
    quant::Observer probe(config_.strategy, config_.observer);
    vit::ParameterSet<T> params = fp.params();
    if (!config_.weights_bypassed()) {
      params.for_each([&](const std::string& name, Tensor<T>& t, bool is_matmul_weight) {
        if (!is_matmul_weight) return;
        quant::Observer obs(quant::Strategy::minmax);
        obs.observe(std::span<const T>(t.data()));
        const QuantParams qp = obs.finalize_minmax(config_.weight_bits, quant::Scheme::symmetric);
        quant::fake_quantize_inplace(t.data(), qp);
        weight_params_.emplace(name, qp);
      });
    }
    model_ = vit::Model<T>(fp.config(), std::move(params));
    for (const auto& s : activation_sites(model_.config(), config_.quantize_attention_probs)) site_names_.push_back(s.name());
  }

  const vit::Model<T>& model() const noexcept { return model_; }
  const QuantConfig& config() const noexcept { return config_; }
  const QuantTable& weight_params() const noexcept { return weight_params_; }
  const QuantTable& activation_params() const noexcept { return act_params_; }
  const std::vector<std::string>& site_names() const noexcept { return site_names_; }
  bool calibrated() const noexcept { return config_.acts_bypassed() || act_params_.size() == site_names_.size(); }

  /// Weights plus activation sites, keyed by tensor/site name.
  QuantTable quant_table() const {
    QuantTable t = weight_params_;
    t.insert(act_params_.begin(), act_params_.end());
    return t;
  }

  /// Replaces the activation table (e.g. read back from disk).
  void set_activation_params(QuantTable table) {
    for (const auto& name : site_names_)
      if (!config_.acts_bypassed() && !table.contains(name)) throw ConfigError("quant table lacks site " + name);
    act_params_.clear();
    for (const auto& name : site_names_)
      if (table.contains(name)) act_params_.emplace(name, table.at(name));
  }

  /// Calibration pass: observe FP activations of the weight-quantised model.
  std::map<std::string, quant::Observer> observe(const Tensor<T>& images) const {
    std::map<std::string, quant::Observer> observers;
    for (const auto& name : site_names_) observers.emplace(name, quant::Observer(config_.strategy, config_.observer));
    const std::size_t count = images.dim(0);
    const std::size_t chunk = config_.calib_batch == 0 ? count : config_.calib_batch;
    vit::SiteHook<T> hook = [&](const vit::Site& site, Tensor<T>& values) {
      observers.at(site.name()).observe(std::span<const T>(values.data()));
    };
    for (std::size_t first = 0; first < count; first += chunk) {
      const std::size_t n = std::min(chunk, count - first);
      Tensor<T> batch = slice(images, first, n);
      vit::forward_with_trace(model_, Var<T>::leaf(std::move(batch)), false, hook, config_.quantize_attention_probs);
    }
    return observers;
  }

  void finalize(std::map<std::string, quant::Observer>& observers) {
    act_params_.clear();
    for (auto& [name, obs] : observers) act_params_.emplace(name, obs.finalize(config_.act_bits, quant::Scheme::asymmetric));
    if (!calibrated()) throw StateError("calibration left sites without quantization parameters");
  }

  /// Logits with activations fake-quantised at every site.
  Tensor<T> logits(const Tensor<T>& images) const {
    if (!calibrated()) throw StateError("quantized model used before calibration");
    vit::SiteHook<T> hook;
    if (!config_.acts_bypassed())
      hook = [this](const vit::Site& site, Tensor<T>& values) {
        quant::fake_quantize_inplace(values.data(), act_params_.at(site.name()));
      };
    return vit::forward_with_trace(model_, Var<T>::leaf(images), false, hook, config_.quantize_attention_probs)
        .logits.value();
  }

 private:
  static Tensor<T> slice(const Tensor<T>& images, std::size_t first, std::size_t n) {
    Shape shape = images.shape();
    const std::size_t per = images.size() / shape[0];
    shape[0] = n;
    std::vector<T> data(images.ptr() + first * per, images.ptr() + (first + n) * per);
    return Tensor<T>(std::move(shape), std::move(data));
  }

  QuantConfig config_;
  vit::Model<T> model_;
  QuantTable weight_params_;
  QuantTable act_params_;
  std::vector<std::string> site_names_;
};

template <typename T>
QuantizedModel<T> wrap_model(const vit::Model<T>& model, int weight_bits, int act_bits, quant::Strategy strategy,
                             quant::ObserverOptions observer = {}) {
  QuantConfig c;
  c.weight_bits = weight_bits;
  c.act_bits = act_bits;
  c.strategy = strategy;
  c.observer = observer;
  return QuantizedModel<T>(model, c);
}

struct CalibrationReport {
  QuantTable clips;  // activation sites
  std::string provenance;  // generated | noise | real
  std::string strategy;
  std::size_t num_samples = 0;
  double seconds = 0;
};

/// Observes every activation site on `samples` and finalises its clip range.
/// Weights are untouched.
template <typename T>
CalibrationReport run_calibration(QuantizedModel<T>& qmodel, const Tensor<T>& samples, const std::string& provenance) {
  if (samples.rank() != 4 || samples.dim(0) == 0) throw ContractError("calibration needs a non-empty image batch");
  const auto t0 = std::chrono::steady_clock::now();
  CalibrationReport report;
  if (!qmodel.config().acts_bypassed()) {
    auto observers = qmodel.observe(samples);
    qmodel.finalize(observers);
  }
  report.clips = qmodel.activation_params();
  report.provenance = provenance;
  report.strategy = quant::to_string(qmodel.config().strategy);
  report.num_samples = samples.dim(0);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

struct EvalReport {
  double accuracy = 0;
  std::string dataset;
  std::size_t num_images = 0;
  std::size_t correct = 0;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"accuracy", r.accuracy}, {"dataset", r.dataset}, {"num_images", r.num_images}, {"correct", r.correct}};
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  j.at("accuracy").get_to(r.accuracy);
  j.at("dataset").get_to(r.dataset);
  j.at("num_images").get_to(r.num_images);
  j.at("correct").get_to(r.correct);
}

inline EvalReport score(const std::vector<int>& predictions, const vit::LabeledImages& data) {
  EvalReport r;
  r.dataset = data.id;
  r.num_images = data.size();
  for (std::size_t i = 0; i < predictions.size(); ++i) r.correct += predictions[i] == data.labels[i];
  r.accuracy = r.num_images ? static_cast<double>(r.correct) / static_cast<double>(r.num_images) : 0.0;
  return r;
}

/// Top-1 accuracy of the full-precision model.
inline EvalReport evaluate_top1(const vit::Model<float>& model, const vit::LabeledImages& data,
                                std::size_t batch = 250) {
  auto preds = vit::predict_batched(data.images, batch, [&](const Tensor<float>& b) {
    return vit::forward_with_trace(model, b, false).logits.value();
  });
  return score(preds, data);
}

/// Top-1 accuracy of a calibrated quantised model.
inline EvalReport evaluate_top1(const QuantizedModel<float>& qmodel, const vit::LabeledImages& data,
                                std::size_t batch = 250) {
  auto preds = vit::predict_batched(data.images, batch, [&](const Tensor<float>& b) { return qmodel.logits(b); });
  return score(preds, data);
}

}  // namespace dfq::pipeline
