#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "dfq/core/ops.hpp"
#include "dfq/vit/params.hpp"

namespace dfq::testing {

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

/// sum(w * y) as a differentiable scalar, w fixed.
inline Var<double> weighted_sum(const Var<double>& y, const Tensor<double>& w) {
  auto flat = Var<double>::make(y.value().reshaped({1, y.size()}), {y}, [y](const Tensor<double>& g) {
    auto& gy = y.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i];
  });
  return ops::sum(ops::linear(flat, Var<double>::leaf(w.reshaped({1, w.size()}))));
}

/// Central difference of f at x along coordinate i.
inline double central_difference(const std::function<double(const Tensor<double>&)>& f, Tensor<double> x,
                                 std::size_t i, double step = 1e-3) {
  const double x0 = x[i];
  x[i] = x0 + step;
  const double up = f(x);
  x[i] = x0 - step;
  const double down = f(x);
  return (up - down) / (2.0 * step);
}

/// |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Worst relative error between an analytic gradient and central differences
/// over `count` coordinates drawn with `seed` (all coordinates when count == 0).
inline double max_gradient_error(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& x,
                                 const Tensor<double>& analytic, std::size_t count, std::uint64_t seed,
                                 double step = 1e-3, const std::function<bool(std::size_t)>& usable = {}) {
  std::vector<std::size_t> coords;
  if (count == 0 || count >= x.size()) {
    for (std::size_t i = 0; i < x.size(); ++i)
      if (!usable || usable(i)) coords.push_back(i);
  } else {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
    while (coords.size() < count) {
      const std::size_t i = pick(rng);
      if ((!usable || usable(i)) && std::find(coords.begin(), coords.end(), i) == coords.end()) coords.push_back(i);
    }
  }
  double worst = 0;
  for (std::size_t i : coords)
    worst = std::max(worst, relative_error(analytic[i], central_difference(f, x, i, step)));
  return worst;
}

}  // namespace dfq::testing
