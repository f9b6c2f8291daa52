#pragma once

// Deterministic synthetic shapes dataset: one bright shape per image on a
// textured background, class = shape kind.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "dfq/core/tensor.hpp"

namespace dfq::vit {

inline constexpr std::size_t kShapeClasses = 10;
inline constexpr float kPixelMean = 0.5f;
inline constexpr float kPixelStd = 0.25f;

inline const std::array<const char*, kShapeClasses>& shape_class_names() {
  static const std::array<const char*, kShapeClasses> names{
      "disk", "square", "triangle", "ring", "plus", "cross", "hbar", "vbar", "diamond", "frame"};
  return names;
}

struct LabeledImages {
  Tensor<float> images;  // [count, 3, side, side], normalised
  std::vector<int> labels;
  std::string id;

  std::size_t size() const noexcept { return labels.size(); }
};

namespace detail {

/// Membership test for shape `cls` with half-extent r, relative coords (dx, dy).
inline bool inside_shape(std::size_t cls, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  const double thick = std::max(1.5, r * 0.35);
  switch (cls) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return ax <= r * 0.8 && ay <= r * 0.8;
    case 2: return dy <= r * 0.8 && dy >= -r && ax <= (dy + r) * 0.55;
    case 3: {
      const double d = std::sqrt(dx * dx + dy * dy);
      return d <= r && d >= r - thick;
    }
    case 4: return (ax <= thick * 0.5 && ay <= r) || (ay <= thick * 0.5 && ax <= r);
    case 5: return (std::abs(dx - dy) <= thick * 0.7 || std::abs(dx + dy) <= thick * 0.7) && ax <= r * 0.8 && ay <= r * 0.8;
    case 6: return ax <= r && ay <= thick * 0.5;
    case 7: return ay <= r && ax <= thick * 0.5;
    case 8: return ax + ay <= r;
    case 9: return std::max(ax, ay) <= r * 0.85 && std::max(ax, ay) >= r * 0.85 - thick;
  }
  return false;
}

}  // namespace detail

/// Renders `count` images of `side` x `side` pixels. Labels cycle through the
/// classes in a seeded random order, so every class is equally represented.
inline LabeledImages make_shapes_dataset(std::size_t count, std::uint64_t seed, std::size_t side = 32) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  LabeledImages out;
  out.images = Tensor<float>(Shape{count, 3, side, side});
  out.labels.resize(count);
  out.id = "shapes-seed" + std::to_string(seed) + "-n" + std::to_string(count);
  for (std::size_t i = 0; i < count; ++i) out.labels[i] = static_cast<int>(i % kShapeClasses);
  std::shuffle(out.labels.begin(), out.labels.end(), rng);

  const double s = static_cast<double>(side);
  const std::size_t plane = side * side;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t cls = static_cast<std::size_t>(out.labels[i]);
    // background: dim base colour plus an oriented sinusoidal texture and grain
    std::array<double, 3> bg{}, fg{}, tex{};
    for (auto& c : bg) c = 0.1 + 0.3 * unit(rng);
    for (auto& c : tex) c = 0.05 + 0.1 * unit(rng);
    const double theta = std::numbers::pi * unit(rng);
    const double freq = 2.0 * std::numbers::pi * (1.5 + 3.0 * unit(rng)) / s;
    const double phase = 2.0 * std::numbers::pi * unit(rng);
    for (auto& c : fg) c = 0.55 + 0.45 * unit(rng);
    const double r = s * (0.22 + 0.12 * unit(rng));
    const double cx = r + (s - 2 * r) * unit(rng), cy = r + (s - 2 * r) * unit(rng);
    float* img = out.images.ptr() + i * 3 * plane;
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        const double xx = static_cast<double>(x) + 0.5, yy = static_cast<double>(y) + 0.5;
        const double wave = std::sin(freq * (xx * std::cos(theta) + yy * std::sin(theta)) + phase);
        const bool on = detail::inside_shape(cls, xx - cx, yy - cy, r);
        for (std::size_t c = 0; c < 3; ++c) {
          double v = on ? fg[c] : bg[c] + tex[c] * wave;
          v += 0.04 * (unit(rng) - 0.5);
          v = std::clamp(v, 0.0, 1.0);
          img[c * plane + y * side + x] = static_cast<float>((v - kPixelMean) / kPixelStd);
        }
      }
  }
  return out;
}

/// Copies images [first, first + n) into a standalone batch tensor.
inline Tensor<float> slice_images(const Tensor<float>& images, std::size_t first, std::size_t n) {
  Shape shape = images.shape();
  const std::size_t per = images.size() / shape[0];
  shape[0] = n;
  std::vector<float> data(images.data().begin() + static_cast<std::ptrdiff_t>(first * per),
                          images.data().begin() + static_cast<std::ptrdiff_t>((first + n) * per));
  return Tensor<float>(std::move(shape), std::move(data));
}

}  // namespace dfq::vit
