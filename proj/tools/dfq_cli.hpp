#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dfq/generator/batch_io.hpp"
#include "dfq/pipeline/density.hpp"
#include "dfq/pipeline/experiment.hpp"
#include "dfq/pipeline/quant_table.hpp"
#include "dfq/vit/checkpoint.hpp"

namespace dfq::cli {

struct Options {
  std::string command;
  std::string model;
  std::string out;
  std::string samples;      // generated-batch manifest
  std::string source = "generated";  // generated | noise | real
  std::string quant_table;
  std::string loss = "PSE+OH+TV";
  int kw = 8, ka = 8;
  std::string strategy = "minmax";
  double gamma = 1e-5, beta = 0.9;
  std::size_t steps = 500;
  double lr = 0.05;
  std::size_t batch = 32;
  double alpha1 = 1.0, alpha2 = 0.05;
  std::uint64_t seed = 0;
  std::size_t seeds = 1;
  bool previews = true;
  bool quantize_probs = false;
  std::size_t epochs = 20;
  double train_lr = 2e-3;
  std::size_t train_count = 3000, test_count = 1000;
  std::uint64_t data_seed = 1;
  std::uint64_t train_seed = 7;
};

inline pipeline::LossTerms parse_loss_terms(const std::string& s) {
  for (const auto& t : pipeline::ablation_grid())
    if (t.name() == s) return t;
  pipeline::LossTerms t{false, false, false};
  std::stringstream in(s);
  for (std::string part; std::getline(in, part, '+');) {
    if (part == "PSE") t.pse = true;
    else if (part == "OH") t.one_hot = true;
    else if (part == "TV") t.tv = true;
    else if (part != "none") throw ConfigError("unknown loss term '" + part + "' (expected PSE, OH, TV or none)");
  }
  return t;
}

inline gen::GenConfig gen_config(const Options& o) {
  gen::GenConfig g;
  g.batch_size = o.batch;
  g.steps = o.steps;
  g.lr = o.lr;
  g.seed = o.seed;
  g.weights = {o.alpha1, o.alpha2};
  g.validate();
  return g;
}

inline pipeline::QuantConfig quant_config(const Options& o) {
  pipeline::QuantConfig q;
  q.weight_bits = o.kw;
  q.act_bits = o.ka;
  q.strategy = quant::parse_strategy(o.strategy);
  q.observer.percentile = o.gamma;
  q.observer.ema_decay = o.beta;
  q.quantize_attention_probs = o.quantize_probs;
  return q;
}

inline vit::Model<float> require_model(const Options& o) {
  if (o.model.empty()) throw ConfigError("--model is required for '" + o.command + "'");
  return vit::load_checkpoint(o.model);
}

inline pipeline::ToyBenchmark benchmark(const Options& o) {
  return pipeline::make_toy_benchmark(o.train_count, o.test_count, o.data_seed);
}

/// Calibration / analysis images: a saved generated batch, fresh noise, the
/// first `batch` training images, or a fresh generation run.
inline Tensor<float> sample_images(const Options& o, const vit::Model<float>& model) {
  if (!o.samples.empty()) return gen::load_generated_batch(o.samples).images;
  const auto g = gen_config(o);
  if (o.source == "noise") return gen::noise_batch<float>(model.config(), g).images;
  if (o.source == "real") {
    const auto train = vit::make_shapes_dataset(o.train_count, o.data_seed);
    return vit::slice_images(train.images, 0, std::min(o.batch, train.size()));
  }
  if (o.source == "generated")
    return pipeline::calibration_samples(model, g, parse_loss_terms(o.loss)).images;
  throw ConfigError("unknown --source '" + o.source + "' (expected generated, noise or real)");
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

inline void cmd_train(const Options& o, std::ostream& out) {
  if (o.out.empty()) throw ConfigError("--out is required for 'train-toy'");
  const auto data = benchmark(o);
  vit::TrainOptions t;
  t.epochs = o.epochs;
  t.lr = o.train_lr;
  t.seed = o.train_seed;
  t.batch_size = o.batch;
  t.on_epoch = [&](std::size_t e, double loss) { out << "epoch " << e + 1 << " loss " << loss << '\n'; };
  const auto config = vit::toy_config();
  const vit::Model<float> model(config, vit::train_toy_model(data.train, config, t));
  vit::save_checkpoint(model, o.out);
  out << "train top1 " << pipeline::evaluate_top1(model, data.train).accuracy << '\n';
  out << "test top1 " << pipeline::evaluate_top1(model, data.test).accuracy << '\n';
  out << "wrote " << o.out << '\n';
}

inline void cmd_generate(const Options& o, std::ostream& out) {
  if (o.out.empty()) throw ConfigError("--out is required for 'generate'");
  const auto model = require_model(o);
  const auto terms = parse_loss_terms(o.loss);
  gen::GeneratedBatch<float> batch;
  if (o.steps == 0) batch = gen::noise_batch<float>(model.config(), gen_config(o));
  else batch = gen::generate_samples(model, pipeline::with_terms(gen_config(o), terms));
  gen::save_generated_batch(batch, o.out, o.previews);
  if (!batch.loss_history.empty()) {
    const auto& last = batch.loss_history.back();
    out << "final L_G " << last.total << " L_PSE " << last.pse << " L_OH " << last.one_hot << " L_TV " << last.tv << '\n';
  }
  out << "wrote " << batch.images.dim(0) << " images to " << o.out << '\n';
}

inline void cmd_calibrate(const Options& o, std::ostream& out) {
  if (o.out.empty()) throw ConfigError("--out is required for 'calibrate'");
  const auto model = require_model(o);
  pipeline::QuantizedModel<float> q(model, quant_config(o));
  const auto report = pipeline::run_calibration(q, sample_images(o, model), o.samples.empty() ? o.source : "generated");
  pipeline::write_quant_table(q, o.out);
  out << "calibrated " << report.clips.size() << " sites on " << report.num_samples << ' ' << report.provenance
      << " images (" << report.strategy << ")\n";
  out << "wrote " << o.out << '\n';
}

inline void cmd_evaluate(const Options& o, std::ostream& out) {
  const auto model = require_model(o);
  const auto data = benchmark(o);
  pipeline::EvalReport r;
  if (o.quant_table.empty()) r = pipeline::evaluate_top1(model, data.test);
  else r = pipeline::evaluate_top1(pipeline::restore_quantized(model, pipeline::read_quant_table(o.quant_table)), data.test);
  const nlohmann::json j = r;
  if (!o.out.empty()) write_json(o.out, j);
  out << j.dump() << '\n';
}

inline void cmd_density(const Options& o, std::ostream& out) {
  if (o.out.empty()) throw ConfigError("--out is required for 'density'");
  const auto model = require_model(o);
  const auto report = pipeline::density_report(model, sample_images(o, model));
  pipeline::write_density_csv(report, o.out);
  for (const auto& l : report.layers)
    out << "layer " << l.layer << " modes " << l.mean_modes << " integral " << l.curve.integral() << '\n';
  out << "mean modes " << report.mean_mode_count() << '\n';
}

inline void cmd_ablate(const Options& o, std::ostream& out) {
  const auto model = require_model(o);
  const auto data = benchmark(o);
  std::vector<pipeline::AblationEntry> rows;
  for (std::size_t i = 0; i < o.seeds; ++i) {
    auto g = gen_config(o);
    g.seed = o.seed + i;
    auto r = pipeline::run_ablation(model, data.test, g, quant_config(o));
    rows.insert(rows.end(), r.begin(), r.end());
  }
  const auto table = pipeline::format_ablation_table(rows, o.kw, o.ka);
  out << table;
  if (!o.out.empty()) std::ofstream(o.out) << table;
}

inline void build_app(CLI::App& app, Options& o) {
  app.description("Data-free post-training quantization of vision transformers");
  app.set_config("--config", "", "flat key = value file mirroring the flags; flags override it");
  app.require_subcommand(1, 1);
  app.fallthrough();
  for (auto [name, help] : {std::pair{"train-toy", "train the toy ViT on the shapes dataset"},
                            {"generate", "synthesise calibration images from noise"},
                            {"calibrate", "wrap a model and calibrate activation clipping"},
                            {"evaluate", "top-1 accuracy on the held-out split"},
                            {"density", "export per-layer patch-similarity density curves"},
                            {"ablate", "loss-combination ablation table"}})
    app.add_subcommand(name, help)->callback([&o, n = std::string(name)] { o.command = n; });

  app.add_option("--model", o.model, "checkpoint manifest");
  app.add_option("--out", o.out, "output path");
  app.add_option("--samples", o.samples, "generated-batch manifest to use as images");
  app.add_option("--source", o.source, "images when --samples is absent: generated, noise or real")->capture_default_str();
  app.add_option("--quant-table", o.quant_table, "quant table to evaluate (FP model when absent)");
  app.add_option("--loss", o.loss, "active generation losses, e.g. PSE+OH+TV, OH+TV, none")->capture_default_str();
  app.add_option("--kw", o.kw, "weight bits (32 = bypass)")->capture_default_str();
  app.add_option("--ka", o.ka, "activation bits (32 = bypass)")->capture_default_str();
  app.add_option("--strategy", o.strategy, "minmax, ema, percentile or omse")->capture_default_str();
  app.add_option("--gamma", o.gamma, "percentile tail fraction")->capture_default_str();
  app.add_option("--beta", o.beta, "EMA decay")->capture_default_str();
  app.add_option("--steps", o.steps, "generation steps")->capture_default_str();
  app.add_option("--lr", o.lr, "generation learning rate")->capture_default_str();
  app.add_option("--batch", o.batch, "images per generated / calibration batch")->capture_default_str();
  app.add_option("--alpha1", o.alpha1, "one-hot loss weight")->capture_default_str();
  app.add_option("--alpha2", o.alpha2, "total-variation loss weight")->capture_default_str();
  app.add_option("--seed", o.seed, "generation seed")->capture_default_str();
  app.add_option("--seeds", o.seeds, "ablate: number of consecutive seeds")->capture_default_str();
  app.add_flag("--previews,!--no-previews", o.previews, "write PNG previews of generated images");
  app.add_flag("--quantize-probs", o.quantize_probs, "also quantise attention probabilities");
  app.add_option("--epochs", o.epochs, "train-toy: epochs")->capture_default_str();
  app.add_option("--train-lr", o.train_lr, "train-toy: learning rate")->capture_default_str();
  app.add_option("--train-seed", o.train_seed, "train-toy: initialisation and shuffling seed")->capture_default_str();
  app.add_option("--train-count", o.train_count, "training-split size")->capture_default_str();
  app.add_option("--test-count", o.test_count, "held-out split size")->capture_default_str();
  app.add_option("--data-seed", o.data_seed, "shapes dataset seed")->capture_default_str();
}

/// Runs one command line. Returns the process exit status.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"", "dfq"};
  Options o;
  build_app(app, o);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return e.get_exit_code() != 0 ? e.get_exit_code() : 2;
  }
  try {
    if (o.command == "train-toy") cmd_train(o, out);
    else if (o.command == "generate") cmd_generate(o, out);
    else if (o.command == "calibrate") cmd_calibrate(o, out);
    else if (o.command == "evaluate") cmd_evaluate(o, out);
    else if (o.command == "density") cmd_density(o, out);
    else if (o.command == "ablate") cmd_ablate(o, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace dfq::cli
