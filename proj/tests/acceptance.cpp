// End-to-end acceptance gate. Prints one PASS/FAIL/SKIP line per criterion and
// exits non-zero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "dfq/pipeline/density.hpp"
#include "dfq/pipeline/experiment.hpp"
#include "dfq/pipeline/quant_table.hpp"
#include "dfq/vit/digest.hpp"
#include "test_support.hpp"

using namespace dfq;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kGaussianEntropyTol = 1e-3;
constexpr double kMixtureGapTol = 5e-2;
constexpr double kGradientTol = 1e-3;
constexpr std::size_t kGradientPixels = 50;
constexpr double kTrainFloor = 0.90;
constexpr double kTestFloor = 0.80;
constexpr double kGapFloor = 0.02;
constexpr double kIntegralTol = 1e-2;
constexpr double kQuantizerBudget = 10.0;
constexpr double kEntropyBudget = 10.0;
constexpr double kGradientBudget = 120.0;
constexpr double kReplicationBudget = 15 * 60.0;

// Toy experiment settings.
constexpr std::size_t kTrainImages = 3000;
constexpr std::size_t kTestImages = 1000;
constexpr std::uint64_t kDataSeed = 1;
constexpr std::uint64_t kTrainSeed = 7;
constexpr std::size_t kEpochs = 20;
constexpr std::size_t kGenSteps = 200;
constexpr std::size_t kGenBatch = 32;
constexpr std::uint64_t kSeeds[] = {0, 1, 2};

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void report(int id, const std::string& title, const std::function<Outcome()>& body, double budget = 0) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = seconds_since(t0);
  if (budget > 0 && secs >= budget) {
    o.pass = false;
    o.detail += "; over the " + std::to_string(budget) + " s budget";
  }
  failures += !o.pass;
  std::printf("%s criterion %d (%s): %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, title.c_str(), o.detail.c_str(),
              secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1 ---------------------------------------------------------------------------

Outcome quantizer_grid_scan() {
  std::size_t violations = 0, fixed_misses = 0, scanned = 0;
  for (int k : {2, 4, 8}) {
    // step 2^-4 keeps every grid point and sub-step probe exactly representable
    const double step = 0.0625;
    const double lo = -std::ldexp(1.0, k - 3);
    const quant::QuantParams qp(k, lo, lo + step * static_cast<double>((1 << k) - 1), quant::Scheme::asymmetric);
    const std::size_t sub = 4096;
    const std::size_t n = static_cast<std::size_t>(qp.max_code()) * sub + 1;
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = qp.clip_lo() + static_cast<double>(i) * (qp.step() / sub);
    const auto fq = quant::fake_quantize(std::span<const double>(v), qp);
    for (std::size_t i = 0; i < n; ++i) {
      violations += !(std::abs(v[i] - fq[i]) <= qp.step() / 2);
      if (i % sub == 0) fixed_misses += fq[i] != v[i];
    }
    scanned += n;
  }
  return {violations == 0 && fixed_misses == 0,
          fmt("%zu points over k in {2,4,8}, %zu bound violations, %zu inexact grid points", scanned, violations,
              fixed_misses)};
}

// 2 ---------------------------------------------------------------------------

double gaussian_entropy(double h) { return 0.5 * std::log(2 * std::numbers::pi * std::numbers::e * h * h); }

Outcome entropy_oracle() {
  double worst_single = 0, worst_gap = 0;
  for (double h : {0.01, 0.1, 1.0}) {
    worst_single = std::max(worst_single, std::abs(similarity::differential_entropy({{0.0}, h}) - gaussian_entropy(h)));
    std::vector<double> two, one(8, 0.0);
    for (int i = 0; i < 4; ++i) two.insert(two.end(), {-25 * h, 25 * h});
    const double gap =
        similarity::differential_entropy({two, h}) - similarity::differential_entropy({one, h});
    worst_gap = std::max(worst_gap, std::abs(gap - std::numbers::ln2));
  }
  return {worst_single < kGaussianEntropyTol && worst_gap < kMixtureGapTol,
          fmt("max |H - 0.5 ln(2 pi e h^2)| = %.2e (tol %.0e), max |gap - ln 2| = %.2e (tol %.0e)", worst_single,
              kGaussianEntropyTol, worst_gap, kMixtureGapTol)};
}

// 3 ---------------------------------------------------------------------------

Outcome gradient_checks() {
  const auto cfg = vit::tiny_config();  // L=2, H=2, d=4, N=16
  const vit::Model<double> model(cfg, vit::init_parameters<double>(cfg, 11));
  gen::GenConfig gc;
  gc.batch_size = 2;
  gc.seed = 5;
  const auto image = gen::init_noise<double>(gc, cfg);
  const auto labels = gen::target_labels(gc, cfg.num_classes);

  using Loss = std::function<Var<double>(const Var<double>&)>;
  const std::vector<std::pair<std::string, Loss>> losses = {
      {"L_PSE", [&](const Var<double>& x) { return similarity::pse_loss(*vit::forward_with_trace(model, x, true).trace); }},
      {"L_OH", [&](const Var<double>& x) { return priors::one_hot_loss(vit::forward_with_trace(model, x, false).logits, labels); }},
      {"L_TV", [&](const Var<double>& x) { return priors::tv_loss(x); }},
      {"L_G", [&](const Var<double>& x) {
         gen::LossRecord r;
         return gen::generation_loss(model, x, labels, gc, r);
       }}};

  // TV is piecewise linear; a difference stencil that straddles a kink is not a derivative
  const std::size_t W = cfg.image_side;
  auto smooth = [&](std::size_t i) {
    const std::size_t x0 = i % W, y0 = (i / W) % W;
    const double step = 1e-4;
    if (x0 + 1 < W && std::abs(image[i] - image[i + 1]) < 2 * step) return false;
    if (x0 > 0 && std::abs(image[i] - image[i - 1]) < 2 * step) return false;
    if (y0 + 1 < W && std::abs(image[i] - image[i + W]) < 2 * step) return false;
    if (y0 > 0 && std::abs(image[i] - image[i - W]) < 2 * step) return false;
    return true;
  };

  bool pass = true;
  std::string detail;
  for (const auto& [name, loss] : losses) {
    auto x = Var<double>::leaf(image, true);
    loss(x).backward();
    auto f = [&](const Tensor<double>& t) { return loss(Var<double>::leaf(t)).value()[0]; };
    const double err = dfq::testing::max_gradient_error(f, image, x.grad(), kGradientPixels, 17, 1e-4, smooth);
    pass &= err < kGradientTol;
    detail += fmt("%s%s %.2e", detail.empty() ? "" : ", ", name.c_str(), err);
  }
  return {pass, "max rel error over 50 pixels: " + detail + fmt(" (tol %.0e)", kGradientTol)};
}

// 4 ---------------------------------------------------------------------------

Outcome volume_ratio() {
  const std::size_t H = 12, N = 196, d = 64;
  const Tensor<float> o(Shape{H, N, d}, 1.0f);
  const auto gamma = similarity::cosine_similarity_matrix(o);
  const double ratio = static_cast<double>(o.size()) / static_cast<double>(gamma.size());
  return {std::round(ratio * 100) / 100 == 3.92 && std::abs(ratio - 768.0 / 196.0) < 1e-12,
          fmt("|O_l| / |Gamma_l| = %zu / %zu = %.6f", o.size(), gamma.size(), ratio)};
}

// 5, 6, 7 ---------------------------------------------------------------------

struct ToyRun {
  vit::Model<float> model;
  pipeline::ToyBenchmark data;
  double train_acc = 0, test_acc = 0;
  // accuracy[seed][row] over the ablation grid
  std::vector<std::vector<double>> accuracy;
  Tensor<float> generated, noise;  // seed-0 calibration batches
  double seconds = 0;
};

ToyRun run_toy_experiment() {
  const auto t0 = std::chrono::steady_clock::now();
  ToyRun run;
  run.data = pipeline::make_toy_benchmark(kTrainImages, kTestImages, kDataSeed);
  vit::TrainOptions t;
  t.epochs = kEpochs;
  t.seed = kTrainSeed;
  const auto cfg = vit::toy_config();
  run.model = vit::Model<float>(cfg, vit::train_toy_model(run.data.train, cfg, t));
  run.train_acc = pipeline::evaluate_top1(run.model, run.data.train).accuracy;
  run.test_acc = pipeline::evaluate_top1(run.model, run.data.test).accuracy;
  std::printf("  toy model: train top1 %.4f, test top1 %.4f (%.1f s)\n", run.train_acc, run.test_acc, seconds_since(t0));

  const pipeline::QuantConfig qc;  // W8/A8 MinMax
  const auto grid = pipeline::ablation_grid();
  for (std::uint64_t seed : kSeeds) {
    gen::GenConfig base;
    base.steps = kGenSteps;
    base.batch_size = kGenBatch;
    base.seed = seed;
    std::vector<double> row;
    for (const auto& terms : grid) {
      const auto samples = pipeline::calibration_samples(run.model, base, terms);
      row.push_back(
          pipeline::calibrate_and_evaluate(run.model, samples.images, qc, run.data.test, terms.name()).accuracy);
      std::printf("  seed %llu %-10s W8/A8 top1 %.4f\n", static_cast<unsigned long long>(seed), terms.name().c_str(),
                  row.back());
      std::fflush(stdout);
      if (seed == kSeeds[0] && terms.name() == "PSE+OH+TV") run.generated = samples.images;
      if (seed == kSeeds[0] && terms.name() == "none") run.noise = samples.images;
    }
    run.accuracy.push_back(row);
  }
  run.seconds = seconds_since(t0);
  return run;
}

std::size_t row_index(const std::string& name) {
  const auto grid = pipeline::ablation_grid();
  for (std::size_t i = 0; i < grid.size(); ++i)
    if (grid[i].name() == name) return i;
  throw std::logic_error("no ablation row " + name);
}

Outcome table1_direction(const ToyRun& run) {
  const std::size_t gi = row_index("PSE+OH+TV"), ni = row_index("none");
  double gen_mean = 0, noise_mean = 0;
  for (const auto& row : run.accuracy) {
    gen_mean += row[gi] / static_cast<double>(run.accuracy.size());
    noise_mean += row[ni] / static_cast<double>(run.accuracy.size());
  }
  const double gap = gen_mean - noise_mean;
  const bool floors = run.train_acc >= kTrainFloor && run.test_acc >= kTestFloor;
  const bool pass = floors && gen_mean >= noise_mean && gap >= kGapFloor && run.seconds < kReplicationBudget;
  return {pass, fmt("train %.2f%% / test %.2f%%; W8/A8 generated %.2f%% vs noise %.2f%%, gap %.2f points "
                    "(need >= %.0f); %.0f s of %.0f s",
                    100 * run.train_acc, 100 * run.test_acc, 100 * gen_mean, 100 * noise_mean, 100 * gap,
                    100 * kGapFloor, run.seconds, kReplicationBudget)};
}

Outcome table3_ordering(const ToyRun& run) {
  const std::size_t full = row_index("PSE+OH+TV"), pse = row_index("PSE"), priors = row_index("OH+TV"),
                    none = row_index("none");
  int holds = 0;
  std::string detail;
  for (std::size_t s = 0; s < run.accuracy.size(); ++s) {
    const auto& a = run.accuracy[s];
    const bool ok = a[full] >= a[pse] && a[pse] > a[priors] && a[priors] > a[none];
    holds += ok;
    detail += fmt("%sseed %zu: %.2f/%.2f/%.2f/%.2f %s", s ? "; " : "", s, 100 * a[full], 100 * a[pse], 100 * a[priors],
                  100 * a[none], ok ? "holds" : "broken");
  }
  return {holds >= 2, fmt("ordering held on %d of 3 seeds (full/PSE/OH+TV/none) ", holds) + detail};
}

Outcome density_modes(const ToyRun& run) {
  const auto gen_report = pipeline::density_report(run.model, run.generated);
  const auto noise_report = pipeline::density_report(run.model, run.noise);
  const fs::path dir = fs::temp_directory_path() / "dfq_acceptance_density";
  fs::create_directories(dir);
  double worst = 0;
  for (const auto& [name, r] : {std::pair{"generated", &gen_report}, {"noise", &noise_report}}) {
    const auto path = dir / (std::string(name) + ".csv");
    pipeline::write_density_csv(*r, path);
    for (const auto& l : pipeline::read_density_csv(path).layers)
      worst = std::max(worst, std::abs(l.curve.integral() - 1.0));
  }
  fs::remove_all(dir);
  const double g = gen_report.mean_mode_count(), n = noise_report.mean_mode_count();
  return {g > n && worst <= kIntegralTol,
          fmt("mean modes generated %.3f vs noise %.3f; max |integral - 1| = %.2e (tol %.0e)", g, n, worst,
              kIntegralTol)};
}

// 8 ---------------------------------------------------------------------------

Outcome strategy_sanity(const ToyRun& run) {
  const auto& samples = run.generated;
  pipeline::QuantConfig mm, pc, om;
  pc.strategy = quant::Strategy::percentile;
  pc.observer.percentile = 0.0;
  om.strategy = quant::Strategy::omse;
  const double acc_mm = pipeline::calibrate_and_evaluate(run.model, samples, mm, run.data.test, "generated").accuracy;
  const double acc_pc = pipeline::calibrate_and_evaluate(run.model, samples, pc, run.data.test, "generated").accuracy;

  pipeline::QuantizedModel<float> q(run.model, om);
  auto observers = q.observe(samples);
  std::size_t worse = 0;
  double worst_ratio = 0;
  for (auto& [name, obs] : observers) {
    const auto buf = std::span<const double>(obs.buffer());
    const double e_omse = quant::quantization_sse(buf, obs.finalize_omse(8, quant::Scheme::asymmetric));
    const double e_mm = quant::quantization_sse(buf, obs.finalize_minmax(8, quant::Scheme::asymmetric));
    worse += e_omse > e_mm;
    if (e_mm > 0) worst_ratio = std::max(worst_ratio, e_omse / e_mm);
  }
  return {acc_pc == acc_mm && worse == 0,
          fmt("percentile(0) %.4f vs MinMax %.4f; OMSE MSE above MinMax at %zu of %zu sites (max ratio %.4f)", acc_pc,
              acc_mm, worse, observers.size(), worst_ratio)};
}

// 9 ---------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome determinism(const ToyRun& run) {
  const fs::path dir = fs::temp_directory_path() / "dfq_acceptance_determinism";
  fs::create_directories(dir);
  auto end_to_end = [&](const std::string& tag) {
    // a short training run, then generate, calibrate and evaluate
    vit::TrainOptions t;
    t.epochs = 1;
    t.seed = kTrainSeed;
    const auto small = vit::make_shapes_dataset(200, kDataSeed);
    const vit::Model<float> fresh(vit::toy_config(), vit::train_toy_model(small, vit::toy_config(), t));

    gen::GenConfig gc;
    gc.steps = 20;
    gc.batch_size = 8;
    gc.seed = 3;
    const auto batch = gen::generate_samples(run.model, gc);
    pipeline::QuantConfig qc;
    qc.strategy = quant::Strategy::omse;
    pipeline::QuantizedModel<float> q(run.model, qc);
    pipeline::run_calibration(q, batch.images, "generated");
    pipeline::write_quant_table(q, dir / (tag + "_table.json"));
    std::ofstream(dir / (tag + "_eval.json")) << nlohmann::json(pipeline::evaluate_top1(q, run.data.test)).dump(2);
    return vit::parameter_digest(fresh.params());
  };
  const auto d1 = end_to_end("a"), d2 = end_to_end("b");
  const bool tables = slurp(dir / "a_table.json") == slurp(dir / "b_table.json");
  const bool evals = slurp(dir / "a_eval.json") == slurp(dir / "b_eval.json");
  const bool nonempty = !slurp(dir / "a_table.json").empty() && !slurp(dir / "a_eval.json").empty();
  fs::remove_all(dir);
  return {tables && evals && nonempty && d1 == d2,
          fmt("quant tables %s, EvalReports %s, trained weights %s", tables ? "byte-identical" : "differ",
              evals ? "byte-identical" : "differ", d1 == d2 ? "identical" : "differ")};
}

}  // namespace

int main() {
  report(1, "quantizer grid scan", quantizer_grid_scan, kQuantizerBudget);
  report(2, "entropy oracle", entropy_oracle, kEntropyBudget);
  report(3, "gradient checks", gradient_checks, kGradientBudget);
  report(4, "volume ratio", volume_ratio);

  ToyRun run;
  std::string setup_error;
  try {
    run = run_toy_experiment();
  } catch (const std::exception& e) {
    setup_error = e.what();
  }
  auto needs_run = [&](const std::function<Outcome()>& body) {
    return [&, body]() -> Outcome {
      if (!setup_error.empty()) return {false, "toy experiment failed: " + setup_error};
      return body();
    };
  };
  report(5, "generated vs noise calibration", needs_run([&] { return table1_direction(run); }));
  report(6, "loss ablation ordering", needs_run([&] { return table3_ordering(run); }));
  report(7, "similarity density modes", needs_run([&] { return density_modes(run); }));
  report(8, "calibration strategy sanity", needs_run([&] { return strategy_sanity(run); }));
  report(9, "end-to-end determinism", needs_run([&] { return determinism(run); }));
  std::printf("SKIP criterion 10 (pretrained DeiT-T on ImageNet): needs a published checkpoint and ImageNet data\n");

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
