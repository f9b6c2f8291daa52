#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "dfq/similarity/pse.hpp"
#include "dfq/vit/model.hpp"

namespace dfq::pipeline {

struct DensityOptions {
  double lo = -1.2, hi = 1.2;
  std::size_t points = 512;
  double prominence = 0.05;
  similarity::EntropyOptions entropy;
};

/// One layer's similarity density: the mean of the per-image KDE curves, plus
/// the mean per-image mode count.
struct LayerDensity {
  std::size_t layer = 0;  // 1-based
  similarity::DensityCurve curve;
  double mean_modes = 0;
};

struct DensityReport {
  std::vector<LayerDensity> layers;

  double mean_mode_count() const {
    double s = 0;
    for (const auto& l : layers) s += l.mean_modes;
    return layers.empty() ? 0.0 : s / static_cast<double>(layers.size());
  }
};

/// Patch-similarity density curves of every layer for one image batch.
template <typename T>
DensityReport density_report(const vit::Model<T>& model, const Tensor<T>& images, const DensityOptions& opt = {}) {
  const auto fwd = vit::forward_with_trace(model, images, true);
  const std::size_t B = images.dim(0);
  DensityReport report;
  for (std::size_t l = 0; l < fwd.trace->layers.size(); ++l) {
    const auto& o = fwd.trace->layers[l].value();
    const std::size_t per = o.size() / B;
    LayerDensity ld;
    ld.layer = l + 1;
    ld.curve.density.assign(opt.points, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
      Tensor<T> one(Shape{o.dim(1), o.dim(2), o.dim(3)}, std::vector<T>(o.ptr() + b * per, o.ptr() + (b + 1) * per));
      const auto g = similarity::cosine_similarity_matrix(one);
      std::vector<double> x;
      for (T v : similarity::extract_training_points(g)) x.push_back(static_cast<double>(v));
      const similarity::DensityModel dm{x, similarity::silverman_bandwidth(x, opt.entropy)};
      const auto c = similarity::windowed_density_curve(dm, opt.lo, opt.hi, opt.points);
      ld.curve.grid = c.grid;
      for (std::size_t i = 0; i < opt.points; ++i) ld.curve.density[i] += c.density[i] / static_cast<double>(B);
      ld.mean_modes += static_cast<double>(similarity::count_modes(c.density, opt.prominence)) / static_cast<double>(B);
    }
    report.layers.push_back(std::move(ld));
  }
  return report;
}

/// CSV with columns layer, x, density.
inline void write_density_csv(const DensityReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot open " + path.string() + " for writing");
  out << "layer,x,density\n";
  out.precision(17);
  for (const auto& l : report.layers)
    for (std::size_t i = 0; i < l.curve.grid.size(); ++i) out << l.layer << ',' << l.curve.grid[i] << ',' << l.curve.density[i] << '\n';
}

/// Parses a density CSV back into per-layer curves (mode counts are not stored).
inline DensityReport read_density_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "layer,x,density") throw LoadError(path.string() + " is not a density CSV");
  DensityReport report;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::size_t layer = 0;
    double x = 0, y = 0;
    char c1 = 0, c2 = 0;
    if (!(row >> layer >> c1 >> x >> c2 >> y) || c1 != ',' || c2 != ',') throw LoadError("bad density row: " + line);
    if (report.layers.empty() || report.layers.back().layer != layer) report.layers.push_back({layer, {}, 0});
    report.layers.back().curve.grid.push_back(x);
    report.layers.back().curve.density.push_back(y);
  }
  return report;
}

}  // namespace dfq::pipeline
