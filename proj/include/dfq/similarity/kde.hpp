#pragma once

// Normal-kernel density estimation and differential entropy.
//
//   f(x) = 1/(M h) * sum_m phi((x - x_m) / h)
//   H    = -integral f log f,  trapezoidal on G points over
//          [min x_m - 6h, max x_m + 6h], integrand 0 where f < 1e-12.
//
// Kernel values on the uniform grid are generated by the multiplicative
// recurrence phi(z + delta) = phi(z) * exp(-z delta - delta^2 / 2), walking
// outward from the grid point nearest each centre and stopping at |z| > 9.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include "dfq/core/autograd.hpp"

namespace dfq::similarity {

/// Training points x_m and bandwidth h of a normal-kernel estimate.
struct DensityModel {
  std::vector<double> points;
  double bandwidth = 0.0;

  void validate() const {
    if (points.empty()) throw ConfigError("density model needs at least one training point");
    if (!(bandwidth > 0.0) || !std::isfinite(bandwidth))
      throw ConfigError("kernel bandwidth must be positive, got " + std::to_string(bandwidth));
  }
};

struct EntropyOptions {
  std::size_t grid_points = 2048;
  double tail = 6.0;            // grid extends this many bandwidths past the extreme points
  double density_floor = 1e-12;  // integrand is zero below this density
  double bandwidth_floor = 0.01;
  double silverman_factor = 1.06;
  std::size_t max_points = 0;  // 0 keeps every upper-triangle entry
  std::uint64_t subsample_seed = 0;
};

inline constexpr double kKernelCutoff = 9.0;

inline double normal_kernel(double z) { return std::exp(-0.5 * z * z) * (0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2); }

inline double sample_stddev(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double ss = 0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

/// h = max(floor, 1.06 * sigma * M^(-1/5)).
inline double silverman_bandwidth(std::span<const double> x, const EntropyOptions& opt = {}) {
  const double h = opt.silverman_factor * sample_stddev(x) * std::pow(static_cast<double>(x.size()), -0.2);
  return std::max(opt.bandwidth_floor, h);
}

inline double kde_density(const DensityModel& model, double x) {
  model.validate();
  double s = 0;
  for (double xm : model.points) s += normal_kernel((x - xm) / model.bandwidth);
  return s / (static_cast<double>(model.points.size()) * model.bandwidth);
}

/// Density evaluated on an ascending grid.
struct DensityCurve {
  std::vector<double> grid;
  std::vector<double> density;

  double integral() const {
    double s = 0;
    for (std::size_t i = 1; i < grid.size(); ++i) s += 0.5 * (density[i] + density[i - 1]) * (grid[i] - grid[i - 1]);
    return s;
  }
};

inline DensityCurve density_curve(const DensityModel& model, double lo, double hi, std::size_t points) {
  if (points < 2 || !(lo < hi)) throw ConfigError("density curve needs lo < hi and at least two points");
  DensityCurve c;
  c.grid.resize(points);
  c.density.resize(points);
  for (std::size_t i = 0; i < points; ++i) {
    c.grid[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
    c.density[i] = kde_density(model, c.grid[i]);
  }
  return c;
}

/// Density on [lo, hi] with each kernel rescaled by its own mass inside the
/// window, so the curve stays a unit-mass density when wide kernels sit near an
/// edge. Equals density_curve when every kernel lies well inside the window.
inline DensityCurve windowed_density_curve(const DensityModel& model, double lo, double hi, std::size_t points) {
  if (points < 2 || !(lo < hi)) throw ConfigError("density curve needs lo < hi and at least two points");
  model.validate();
  const double h = model.bandwidth;
  auto cdf = [](double z) { return 0.5 * std::erfc(-z * std::numbers::sqrt2 / 2); };
  std::vector<double> weight;
  weight.reserve(model.points.size());
  for (double xm : model.points) weight.push_back(1.0 / std::max(cdf((hi - xm) / h) - cdf((lo - xm) / h), 1e-300));
  DensityCurve c;
  c.grid.resize(points);
  c.density.resize(points);
  const double norm = static_cast<double>(model.points.size()) * h;
  for (std::size_t i = 0; i < points; ++i) {
    c.grid[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
    double s = 0;
    for (std::size_t m = 0; m < model.points.size(); ++m) s += weight[m] * normal_kernel((c.grid[i] - model.points[m]) / h);
    c.density[i] = s / norm;
  }
  return c;
}

/// Local maxima whose prominence is at least `rel_prominence` times the global peak.
inline std::size_t count_modes(std::span<const double> y, double rel_prominence = 0.05) {
  if (y.empty()) return 0;
  const double peak = *std::max_element(y.begin(), y.end());
  if (!(peak > 0)) return 0;
  const double need = rel_prominence * peak;
  std::size_t modes = 0;
  const std::size_t n = y.size();
  for (std::size_t i = 0; i < n; ++i) {
    // plateau-aware local maximum: strictly above the left neighbour run and right neighbour run
    std::size_t j = i;
    while (j + 1 < n && y[j + 1] == y[i]) ++j;
    const bool left_ok = i == 0 || y[i - 1] < y[i];
    const bool right_ok = j + 1 == n || y[j + 1] < y[i];
    if (left_ok && right_ok && !(i == 0 && j + 1 == n)) {
      double left_min = y[i], right_min = y[i];
      for (std::size_t k = i; k-- > 0;) {
        if (y[k] > y[i]) break;
        left_min = std::min(left_min, y[k]);
      }
      for (std::size_t k = j + 1; k < n; ++k) {
        if (y[k] > y[i]) break;
        right_min = std::min(right_min, y[k]);
      }
      if (y[i] - std::max(left_min, right_min) >= need) ++modes;
    }
    i = j;
  }
  return modes;
}

namespace detail {

/// Grid geometry and per-grid-point kernel sums for one entropy evaluation.
struct EntropyEval {
  double h = 0, lo = 0, hi = 0, step = 0;
  std::size_t argmin = 0, argmax = 0;
  bool h_floored = true;
  std::vector<double> f, s1, s2;  // density, sum phi z, sum phi z^2 (unnormalised)
  double entropy = 0;
};

/// Calls visit(j, z, phi) for every grid index j with |z_j| <= cutoff,
/// z_j = (g_j - x) / h, g_j = lo + j * step.
template <typename F>
void for_each_kernel(double x, double h, double lo, double step, std::size_t G, F&& visit) {
  const double delta = step / h;
  const double centre = (x - lo) / step;
  const auto j0 = static_cast<long>(std::clamp(std::round(centre), 0.0, static_cast<double>(G - 1)));
  const double z0 = (lo + static_cast<double>(j0) * step - x) / h;
  const double c = std::exp(-delta * delta);
  // upward
  {
    double z = z0, phi = normal_kernel(z0), a = std::exp(-z0 * delta - 0.5 * delta * delta);
    for (long j = j0; j < static_cast<long>(G); ++j) {
      if (z > kKernelCutoff) break;
      if (z >= -kKernelCutoff) visit(static_cast<std::size_t>(j), z, phi);
      phi *= a;
      a *= c;
      z += delta;
    }
  }
  // downward
  {
    double z = z0 - delta, b = std::exp(z0 * delta - 0.5 * delta * delta);
    double phi = normal_kernel(z0) * b;
    b *= c;
    for (long j = j0 - 1; j >= 0; --j) {
      if (z < -kKernelCutoff) break;
      if (z <= kKernelCutoff) visit(static_cast<std::size_t>(j), z, phi);
      phi *= b;
      b *= c;
      z -= delta;
    }
  }
}

inline EntropyEval evaluate_entropy(std::span<const double> x, double h, bool h_floored, const EntropyOptions& opt) {
  if (x.empty()) throw ConfigError("entropy needs at least one training point");
  if (!(h > 0.0)) throw ConfigError("kernel bandwidth must be positive");
  const std::size_t G = opt.grid_points;
  if (G < 2) throw ConfigError("entropy grid needs at least two points");
  EntropyEval e;
  e.h = h;
  e.h_floored = h_floored;
  if (!std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); }) || !std::isfinite(h)) {
    e.entropy = std::numeric_limits<double>::quiet_NaN();
    return e;
  }
  e.argmin = static_cast<std::size_t>(std::min_element(x.begin(), x.end()) - x.begin());
  e.argmax = static_cast<std::size_t>(std::max_element(x.begin(), x.end()) - x.begin());
  e.lo = x[e.argmin] - opt.tail * h;
  e.hi = x[e.argmax] + opt.tail * h;
  e.step = (e.hi - e.lo) / static_cast<double>(G - 1);
  e.f.assign(G, 0.0);
  e.s1.assign(G, 0.0);
  e.s2.assign(G, 0.0);
  for (double xm : x)
    for_each_kernel(xm, h, e.lo, e.step, G, [&](std::size_t j, double z, double phi) {
      e.f[j] += phi;
      e.s1[j] += phi * z;
      e.s2[j] += phi * z * z;
    });
  const double norm = 1.0 / (static_cast<double>(x.size()) * h);
  double acc = 0;
  for (std::size_t j = 0; j < G; ++j) {
    e.f[j] *= norm;
    const double w = (j == 0 || j + 1 == G) ? 0.5 : 1.0;
    if (e.f[j] >= opt.density_floor) acc += w * e.f[j] * std::log(e.f[j]);
  }
  e.entropy = -acc * e.step;
  return e;
}

/// dH/dx_m for the evaluation `e` (which includes the bandwidth's and grid
/// bounds' dependence on the points unless the bandwidth is fixed).
inline std::vector<double> entropy_gradient(std::span<const double> x, const EntropyEval& e, bool bandwidth_depends,
                                            const EntropyOptions& opt) {
  const std::size_t G = opt.grid_points, M = x.size();
  if (e.f.empty()) return std::vector<double>(M, std::numeric_limits<double>::quiet_NaN());
  const double Md = static_cast<double>(M), h = e.h;
  std::vector<double> a(G, 0.0);  // dH/df_j
  for (std::size_t j = 0; j < G; ++j) {
    const double w = (j == 0 || j + 1 == G) ? 0.5 : 1.0;
    if (e.f[j] >= opt.density_floor) a[j] = -w * e.step * (std::log(e.f[j]) + 1.0);
  }
  std::vector<double> grad(M, 0.0);
  const double kx = 1.0 / (Md * h * h);
  for (std::size_t m = 0; m < M; ++m) {
    double s = 0;
    for_each_kernel(x[m], h, e.lo, e.step, G, [&](std::size_t j, double z, double phi) { s += a[j] * phi * z; });
    grad[m] = s * kx;
  }
  // grid placement: g_j = lo (1 - t_j) + hi t_j, step = (hi - lo)/(G - 1)
  double d_lo = 0, d_hi = 0, d_h = 0;
  const double d_step = e.step > 0 ? e.entropy / e.step : 0.0;
  for (std::size_t j = 0; j < G; ++j) {
    if (a[j] == 0.0) continue;
    const double t = static_cast<double>(j) / static_cast<double>(G - 1);
    const double d_g = -a[j] * e.s1[j] * kx;
    d_lo += d_g * (1.0 - t);
    d_hi += d_g * t;
    d_h += a[j] * (-e.f[j] / h + e.s2[j] * kx);
  }
  d_lo -= d_step / static_cast<double>(G - 1);
  d_hi += d_step / static_cast<double>(G - 1);
  grad[e.argmin] += d_lo;
  grad[e.argmax] += d_hi;
  if (bandwidth_depends) {
    d_h += opt.tail * (d_hi - d_lo);
    if (!e.h_floored && M > 1) {
      const double mean = std::accumulate(x.begin(), x.end(), 0.0) / Md;
      const double sigma = sample_stddev(x);
      const double dh_dsigma = opt.silverman_factor * std::pow(Md, -0.2);
      for (std::size_t m = 0; m < M; ++m) grad[m] += d_h * dh_dsigma * (x[m] - mean) / ((Md - 1.0) * sigma);
    }
  }
  return grad;
}

}  // namespace detail

/// Differential entropy of a fixed-bandwidth model by trapezoidal quadrature.
inline double differential_entropy(const DensityModel& model, const EntropyOptions& opt = {}) {
  model.validate();
  return detail::evaluate_entropy(model.points, model.bandwidth, true, opt).entropy;
}

/// Entropy of the KDE with Silverman bandwidth; optionally returns dH/dx_m.
inline double silverman_entropy(std::span<const double> x, const EntropyOptions& opt = {},
                                std::vector<double>* grad = nullptr) {
  const double raw = opt.silverman_factor * sample_stddev(x) * std::pow(static_cast<double>(x.size()), -0.2);
  const bool floored = !(raw > opt.bandwidth_floor);
  const auto e = detail::evaluate_entropy(x, floored ? opt.bandwidth_floor : raw, floored, opt);
  if (grad) *grad = detail::entropy_gradient(x, e, true, opt);
  return e.entropy;
}

/// Fixed-bandwidth entropy gradient with respect to the training points.
inline std::vector<double> differential_entropy_gradient(const DensityModel& model, const EntropyOptions& opt = {}) {
  model.validate();
  const auto e = detail::evaluate_entropy(model.points, model.bandwidth, true, opt);
  return detail::entropy_gradient(model.points, e, false, opt);
}

/// Row-wise Silverman-bandwidth entropy as a differentiable op: [B, M] -> [B].
template <typename T>
Var<T> kde_entropy(const Var<T>& points, const EntropyOptions& opt = {}) {
  if (points.shape().size() != 2) throw ConfigError("kde_entropy expects [B, M]");
  const std::size_t B = points.shape()[0], M = points.shape()[1];
  Tensor<T> out(Shape{B});
  std::vector<std::vector<double>> grads(B);
  const bool want_grad = points.requires_grad();
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> x(points.value().ptr() + b * M, points.value().ptr() + (b + 1) * M);
    out[b] = static_cast<T>(silverman_entropy(x, opt, want_grad ? &grads[b] : nullptr));
  }
  return Var<T>::make(std::move(out), {points}, [points, grads = std::move(grads), B, M](const Tensor<T>& g) {
    auto& gp = points.grad_buffer();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t m = 0; m < M; ++m) gp[b * M + m] += static_cast<T>(static_cast<double>(g[b]) * grads[b][m]);
  });
}

}  // namespace dfq::similarity
