#pragma once

#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "dfq/generator/generator.hpp"
#include "dfq/pipeline/quantized_model.hpp"

namespace dfq::pipeline {

/// Training split and held-out split of the shapes dataset.
struct ToyBenchmark {
  vit::LabeledImages train, test;
};

inline ToyBenchmark make_toy_benchmark(std::size_t train_count = 3000, std::size_t test_count = 1000,
                                       std::uint64_t seed = 1) {
  return {vit::make_shapes_dataset(train_count, seed), vit::make_shapes_dataset(test_count, seed + 1)};
}

/// Which generation-loss terms are active.
struct LossTerms {
  bool pse = true, one_hot = true, tv = true;

  std::string name() const {
    if (!pse && !one_hot && !tv) return "none";
    std::string s;
    for (auto [on, label] : {std::pair{pse, "PSE"}, {one_hot, "OH"}, {tv, "TV"}})
      if (on) s += (s.empty() ? "" : "+") + std::string(label);
    return s;
  }
};

/// The six loss combinations of the ablation grid.
inline std::vector<LossTerms> ablation_grid() {
  return {{false, false, false}, {false, true, true}, {true, false, false},
          {true, true, false},   {true, false, true}, {true, true, true}};
}

/// `base` with inactive terms switched off (their weight set to zero).
inline gen::GenConfig with_terms(gen::GenConfig base, const LossTerms& t) {
  base.use_pse = t.pse;
  if (!t.one_hot) base.weights.alpha1 = 0.0;
  if (!t.tv) base.weights.alpha2 = 0.0;
  return base;
}

/// Calibration samples for a loss combination; no active term means plain noise.
inline gen::GeneratedBatch<float> calibration_samples(const vit::Model<float>& model, const gen::GenConfig& base,
                                                      const LossTerms& t) {
  if (!t.pse && !t.one_hot && !t.tv) return gen::noise_batch<float>(model.config(), base);
  return gen::generate_samples(model, with_terms(base, t));
}

/// Wraps, calibrates on `samples` and scores the quantized model.
inline EvalReport calibrate_and_evaluate(const vit::Model<float>& model, const Tensor<float>& samples,
                                         const QuantConfig& qc, const vit::LabeledImages& eval,
                                         const std::string& provenance, CalibrationReport* calib = nullptr) {
  QuantizedModel<float> q(model, qc);
  auto report = run_calibration(q, samples, provenance);
  if (calib) *calib = std::move(report);
  return evaluate_top1(q, eval);
}

struct AblationEntry {
  LossTerms terms;
  std::uint64_t seed = 0;
  double accuracy = 0;
  double final_pse = 0;  // L_PSE of the calibration batch (after generation)
};

/// Generates calibration samples for every row of `grid`, calibrates a fresh
/// quantized model on each and scores it on `eval`.
inline std::vector<AblationEntry> run_ablation(const vit::Model<float>& model, const vit::LabeledImages& eval,
                                               const gen::GenConfig& base, const QuantConfig& qc,
                                               const std::vector<LossTerms>& grid = ablation_grid(),
                                               const std::function<void(const AblationEntry&)>& on_row = {}) {
  std::vector<AblationEntry> out;
  for (const auto& terms : grid) {
    const auto samples = calibration_samples(model, base, terms);
    AblationEntry e;
    e.terms = terms;
    e.seed = base.seed;
    e.accuracy = calibrate_and_evaluate(model, samples.images, qc, eval, terms.name()).accuracy;
    const auto fwd = vit::forward_with_trace(model, samples.images, true);
    e.final_pse = static_cast<double>(similarity::pse_loss(*fwd.trace, base.entropy).value()[0]);
    out.push_back(e);
    if (on_row) on_row(e);
  }
  return out;
}

/// Plain-text comparison table, one row per entry.
inline std::string format_ablation_table(const std::vector<AblationEntry>& rows, int weight_bits, int act_bits) {
  std::ostringstream s;
  s << "PSE  OH   TV   prec    seed  top1(%)  L_PSE\n";
  for (const auto& r : rows) {
    auto mark = [](bool on) { return on ? "yes  " : "no   "; };
    s << mark(r.terms.pse) << mark(r.terms.one_hot) << mark(r.terms.tv) << 'W' << weight_bits << "/A" << act_bits
      << "   " << std::setw(4) << r.seed << "  " << std::fixed << std::setprecision(2) << std::setw(7)
      << 100.0 * r.accuracy << "  " << std::setprecision(4) << r.final_pse << '\n';
  }
  return s.str();
}

}  // namespace dfq::pipeline
