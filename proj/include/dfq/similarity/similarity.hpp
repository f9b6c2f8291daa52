#pragma once

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "dfq/core/autograd.hpp"

namespace dfq::similarity {

inline constexpr double kCosineEps = 1e-8;

/// Cosine similarity between the patch vectors of one layer's per-head output.
/// o: [H, N, d]; patch i's vector is the H*d slice o[:, i, :]. Returns [N, N].
template <typename T>
Tensor<T> cosine_similarity_matrix(const Tensor<T>& o) {
  if (o.rank() != 3) throw ConfigError("cosine_similarity_matrix expects [H, N, d], got " + shape_string(o.shape()));
  const std::size_t H = o.dim(0), N = o.dim(1), d = o.dim(2);
  auto at = [&](std::size_t h, std::size_t i, std::size_t j) { return static_cast<double>(o[(h * N + i) * d + j]); };
  std::vector<double> norm(N, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t j = 0; j < d; ++j) norm[i] += at(h, i, j) * at(h, i, j);
    norm[i] = std::sqrt(norm[i]);
  }
  Tensor<T> gamma(Shape{N, N});
  for (std::size_t a = 0; a < N; ++a)
    for (std::size_t b = a; b < N; ++b) {
      double dot = 0;
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t j = 0; j < d; ++j) dot += at(h, a, j) * at(h, b, j);
      const auto v = static_cast<T>(dot / (norm[a] * norm[b] + kCosineEps));
      gamma[a * N + b] = v;
      gamma[b * N + a] = v;
    }
  return gamma;
}

/// Strict upper-triangle entries (i < j) in row-major order; M = N(N-1)/2.
template <typename T>
std::vector<T> extract_training_points(const Tensor<T>& gamma) {
  if (gamma.rank() != 2 || gamma.dim(0) != gamma.dim(1)) throw ContractError("similarity matrix must be square");
  const std::size_t N = gamma.dim(0);
  if (N < 2) throw ContractError("need at least two patches to extract training points");
  std::vector<T> out;
  out.reserve(N * (N - 1) / 2);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j < N; ++j) out.push_back(gamma[i * N + j]);
  return out;
}

/// Flat indices (i * N + j, i < j) of the upper triangle, optionally a seeded
/// uniform subsample of size `cap` (kept in ascending order) when M > cap > 0.
inline std::vector<std::size_t> upper_triangle_indices(std::size_t N, std::size_t cap = 0, std::uint64_t seed = 0) {
  if (N < 2) throw ContractError("need at least two patches to extract training points");
  std::vector<std::size_t> idx;
  idx.reserve(N * (N - 1) / 2);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j < N; ++j) idx.push_back(i * N + j);
  if (cap > 0 && idx.size() > cap) {
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> picked;
    std::sample(idx.begin(), idx.end(), std::back_inserter(picked), cap, rng);
    idx = std::move(picked);
  }
  return idx;
}

/// Batched differentiable cosine-similarity matrices: [B, H, N, d] -> [B, N, N].
template <typename T>
Var<T> cosine_similarity(const Var<T>& o) {
  if (o.shape().size() != 4) throw ConfigError("cosine_similarity expects [B, H, N, d]");
  const std::size_t B = o.shape()[0], H = o.shape()[1], N = o.shape()[2], d = o.shape()[3];
  const std::size_t W = H * d;
  // regroup each image's patch vectors contiguously: u[b][i] in R^{H*d}
  std::vector<double> u(B * N * W);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < d; ++j)
          u[(b * N + i) * W + h * d + j] = static_cast<double>(o.value()[((b * H + h) * N + i) * d + j]);
  std::vector<double> norm(B * N), dot(B * N * N);
  Tensor<T> out(Shape{B, N, N});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < N; ++i) {
      const double* ui = &u[(b * N + i) * W];
      norm[b * N + i] = std::sqrt(std::inner_product(ui, ui + W, ui, 0.0));
    }
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = i; j < N; ++j) {
        const double* ui = &u[(b * N + i) * W];
        const double* uj = &u[(b * N + j) * W];
        const double dp = std::inner_product(ui, ui + W, uj, 0.0);
        dot[(b * N + i) * N + j] = dot[(b * N + j) * N + i] = dp;
        const auto v = static_cast<T>(dp / (norm[b * N + i] * norm[b * N + j] + kCosineEps));
        out[(b * N + i) * N + j] = out[(b * N + j) * N + i] = v;
      }
  }
  return Var<T>::make(std::move(out), {o}, [o, u = std::move(u), norm = std::move(norm), dot = std::move(dot), B, H, N, d,
                                            W](const Tensor<T>& g) {
    // G = dot / (n_i n_j + eps); dG/du_i = u_j / D - dot * n_j * (u_i / n_i) / D^2
    std::vector<double> du(u.size(), 0.0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) {
          const double gij = static_cast<double>(g[(b * N + i) * N + j]);
          if (gij == 0.0) continue;
          const double ni = norm[b * N + i], nj = norm[b * N + j];
          const double den = ni * nj + kCosineEps;
          const double dp = dot[(b * N + i) * N + j];
          const double* ui = &u[(b * N + i) * W];
          const double* uj = &u[(b * N + j) * W];
          double* dui = &du[(b * N + i) * W];
          double* duj = &du[(b * N + j) * W];
          const double ci = ni > 0 ? dp * nj / (den * den * ni) : 0.0;
          const double cj = nj > 0 ? dp * ni / (den * den * nj) : 0.0;
          for (std::size_t k = 0; k < W; ++k) {
            dui[k] += gij * (uj[k] / den - ci * ui[k]);
            duj[k] += gij * (ui[k] / den - cj * uj[k]);
          }
        }
    auto& go = o.grad_buffer();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t j = 0; j < d; ++j)
            go[((b * H + h) * N + i) * d + j] += static_cast<T>(du[(b * N + i) * W + h * d + j]);
  });
}

/// Gathers the given flat entries of each [N, N] matrix: [B, N, N] -> [B, M].
template <typename T>
Var<T> gather_entries(const Var<T>& gamma, const std::vector<std::size_t>& idx) {
  const std::size_t B = gamma.shape()[0], NN = gamma.shape()[1] * gamma.shape()[2], M = idx.size();
  Tensor<T> out(Shape{B, M});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t m = 0; m < M; ++m) out[b * M + m] = gamma.value()[b * NN + idx[m]];
  return Var<T>::make(std::move(out), {gamma}, [gamma, idx, B, NN, M](const Tensor<T>& g) {
    auto& gg = gamma.grad_buffer();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t m = 0; m < M; ++m) gg[b * NN + idx[m]] += g[b * M + m];
  });
}

}  // namespace dfq::similarity
