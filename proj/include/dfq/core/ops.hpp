#pragma once

// Differentiable tensor ops used by the transformer and the losses.
// Matrix-shaped arguments are row-major [rows, cols].

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "dfq/core/autograd.hpp"

namespace dfq::ops {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

namespace detail {

inline void expect_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r)
    throw ConfigError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_string(s));
}

template <typename T>
CMapMat<T> as_mat(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return CMapMat<T>(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
MapMat<T> as_mat(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MapMat<T>(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

}  // namespace detail

/// Row-wise softmax with row-max subtraction, in place on a [rows, cols] buffer.
template <typename T>
void softmax_rows(std::span<T> buf, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = buf.data() + r * cols;
    T mx = row[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    T sum = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    for (std::size_t c = 0; c < cols; ++c) row[c] /= sum;
  }
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape())
    throw ConfigError("add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return Var<T>::make(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    for (const auto* v : {&a, &b}) {
      if (!v->requires_grad()) continue;
      auto& gb = v->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x *= c;
  return Var<T>::make(std::move(out), {a}, [a, c](const Tensor<T>& g) {
    auto& gb = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += c * g[i];
  });
}

/// Sum of all elements as a scalar.
template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T x : a.value().data()) s += x;
  return Var<T>::make(Tensor<T>(Shape{}, s), {a}, [a](const Tensor<T>& g) {
    auto& gb = a.grad_buffer();
    for (auto& x : gb.data()) x += g[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

/// y = x W^T + b, x: [R, K], w: [O, K], b: [O] or undefined.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = {}) {
  detail::expect_rank(x.shape(), 2, "linear");
  detail::expect_rank(w.shape(), 2, "linear");
  const std::size_t rows = x.shape()[0], in = x.shape()[1], outd = w.shape()[0];
  if (w.shape()[1] != in)
    throw ConfigError("linear: input width " + std::to_string(in) + " vs weight " + shape_string(w.shape()));
  if (b.defined() && b.size() != outd) throw ConfigError("linear: bias size mismatch");
  Tensor<T> out(Shape{rows, outd});
  auto xm = detail::as_mat(x.value(), rows, in);
  auto wm = detail::as_mat(w.value(), outd, in);
  auto om = detail::as_mat(out, rows, outd);
  om.noalias() = xm * wm.transpose();
  if (b.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(b.value().ptr(), static_cast<Eigen::Index>(outd));
    om.rowwise() += bv;
  }
  std::vector<Var<T>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return Var<T>::make(std::move(out), std::move(parents), [x, w, b, rows, in, outd](const Tensor<T>& g) {
    auto gm = detail::as_mat(g, rows, outd);
    if (x.requires_grad()) {
      auto gx = detail::as_mat(x.grad_buffer(), rows, in);
      gx.noalias() += gm * detail::as_mat(w.value(), outd, in);
    }
    if (w.requires_grad()) {
      auto gw = detail::as_mat(w.grad_buffer(), outd, in);
      gw.noalias() += gm.transpose() * detail::as_mat(x.value(), rows, in);
    }
    if (b.defined() && b.requires_grad()) {
      auto& gb = b.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < outd; ++o) gb[o] += g[r * outd + o];
    }
  });
}

/// Row-wise layer normalisation over the last axis of a [R, C] input.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-6)) {
  detail::expect_rank(x.shape(), 2, "layer_norm");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (gamma.size() != cols || beta.size() != cols) throw ConfigError("layer_norm: affine size mismatch");
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().ptr() + r * cols;
    T mu = 0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<T>(cols);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const T h = (xr[c] - mu) * inv_std[r];
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * gamma.value()[c] + beta.value()[c];
    }
  }
  return Var<T>::make(std::move(out), {x, gamma, beta},
                      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                       cols](const Tensor<T>& g) {
                        if (gamma.requires_grad() || beta.requires_grad()) {
                          auto& gg = gamma.grad_buffer();
                          auto& gbeta = beta.grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < cols; ++c) {
                              gg[c] += g[r * cols + c] * xhat[r * cols + c];
                              gbeta[c] += g[r * cols + c];
                            }
                        }
                        if (!x.requires_grad()) return;
                        auto& gx = x.grad_buffer();
                        const T n = static_cast<T>(cols);
                        for (std::size_t r = 0; r < rows; ++r) {
                          T sum_dh = 0, sum_dh_h = 0;
                          for (std::size_t c = 0; c < cols; ++c) {
                            const T dh = g[r * cols + c] * gamma.value()[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * cols + c];
                          }
                          for (std::size_t c = 0; c < cols; ++c) {
                            const T dh = g[r * cols + c] * gamma.value()[c];
                            gx[r * cols + c] +=
                                inv_std[r] * (dh - sum_dh / n - xhat[r * cols + c] * sum_dh_h / n);
                          }
                        }
                      });
}

/// Exact (erf-based) GELU.
template <typename T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.value()[i];
    out[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  return Var<T>::make(std::move(out), {x}, [x, inv_sqrt2](const Tensor<T>& g) {
    auto& gx = x.grad_buffer();
    const T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = x.value()[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

/// Observation/transformation point. `fn` may rewrite the forward values in
/// place (fake quantisation) or only read them (calibration); the gradient
/// passes straight through.
template <typename T>
Var<T> hook(const Var<T>& x, const std::function<void(Tensor<T>&)>& fn) {
  Tensor<T> out = x.value();
  fn(out);
  return Var<T>::make(std::move(out), {x}, [x](const Tensor<T>& g) {
    auto& gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// Multi-head scaled dot-product attention.
///
/// q, k, v: [batch * tokens, heads * head_dim]. Returns the per-head outputs
/// softmax(Q_i K_i^T / sqrt(d)) V_i laid out as [batch, heads, tokens, head_dim].
/// `probs_hook`, when set, sees the full [batch, heads, tokens, tokens]
/// probability tensor before it multiplies V.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t batch, std::size_t tokens,
                 std::size_t heads, const std::function<void(Tensor<T>&)>& probs_hook = {}) {
  detail::expect_rank(q.shape(), 2, "attention");
  const std::size_t width = q.shape()[1];
  if (q.shape() != k.shape() || q.shape() != v.shape()) throw ConfigError("attention: q/k/v shape mismatch");
  if (q.shape()[0] != batch * tokens || width % heads != 0) throw ConfigError("attention: bad geometry");
  const std::size_t hd = width / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  using Mat = RowMat<T>;
  auto head_block = [=](const Tensor<T>& src, std::size_t b, std::size_t h) {
    Mat m(static_cast<Eigen::Index>(tokens), static_cast<Eigen::Index>(hd));
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t j = 0; j < hd; ++j) m(t, j) = src[(b * tokens + t) * width + h * hd + j];
    return m;
  };

  Tensor<T> probs(Shape{batch, heads, tokens, tokens});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const Mat qm = head_block(q.value(), b, h), km = head_block(k.value(), b, h);
      auto pm = detail::as_mat(probs, batch * heads * tokens, tokens)
                    .middleRows(static_cast<Eigen::Index>((b * heads + h) * tokens), static_cast<Eigen::Index>(tokens));
      pm.noalias() = (qm * km.transpose()) * scale;
    }
  softmax_rows(probs.data(), batch * heads * tokens, tokens);
  Tensor<T> used_probs;
  const bool hooked = static_cast<bool>(probs_hook);
  if (hooked) {
    used_probs = probs;
    probs_hook(used_probs);
  }
  const Tensor<T>& p_eff = hooked ? used_probs : probs;

  Tensor<T> out(Shape{batch, heads, tokens, hd});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const Mat vm = head_block(v.value(), b, h);
      const auto pm = detail::as_mat(p_eff, batch * heads * tokens, tokens)
                          .middleRows(static_cast<Eigen::Index>((b * heads + h) * tokens),
                                      static_cast<Eigen::Index>(tokens));
      auto om = detail::as_mat(out, batch * heads * tokens, hd)
                    .middleRows(static_cast<Eigen::Index>((b * heads + h) * tokens), static_cast<Eigen::Index>(tokens));
      om.noalias() = pm * vm;
    }

  return Var<T>::make(
      std::move(out), {q, k, v},
      [q, k, v, probs = std::move(probs), batch, tokens, heads, hd, width, scale, head_block](const Tensor<T>& g) {
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h) {
            const Mat qm = head_block(q.value(), b, h), km = head_block(k.value(), b, h),
                      vm = head_block(v.value(), b, h);
            const Eigen::Index off = static_cast<Eigen::Index>((b * heads + h) * tokens);
            const Eigen::Index nt = static_cast<Eigen::Index>(tokens);
            const Mat pm = detail::as_mat(probs, batch * heads * tokens, tokens).middleRows(off, nt);
            const Mat gm = detail::as_mat(g, batch * heads * tokens, hd).middleRows(off, nt);
            const Mat dp = gm * vm.transpose();
            const Mat dv = pm.transpose() * gm;
            Mat ds(nt, nt);
            for (Eigen::Index r = 0; r < nt; ++r) {
              const T dot = dp.row(r).dot(pm.row(r));
              for (Eigen::Index c = 0; c < nt; ++c) ds(r, c) = pm(r, c) * (dp(r, c) - dot);
            }
            const Mat dq = (ds * km) * scale;
            const Mat dk = (ds.transpose() * qm) * scale;
            auto scatter = [&](const Var<T>& dst, const Mat& m) {
              if (!dst.requires_grad()) return;
              auto& gb = dst.grad_buffer();
              for (std::size_t t = 0; t < tokens; ++t)
                for (std::size_t j = 0; j < hd; ++j)
                  gb[(b * tokens + t) * width + h * hd + j] +=
                      m(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j));
            };
            scatter(q, dq);
            scatter(k, dk);
            scatter(v, dv);
          }
      });
}

/// [batch, heads, tokens, d] -> [batch * tokens, heads * d] (head concatenation).
template <typename T>
Var<T> merge_heads(const Var<T>& x) {
  detail::expect_rank(x.shape(), 4, "merge_heads");
  const std::size_t B = x.shape()[0], H = x.shape()[1], N = x.shape()[2], d = x.shape()[3];
  auto index = [=](std::size_t b, std::size_t h, std::size_t t, std::size_t j) {
    return std::pair{((b * H + h) * N + t) * d + j, (b * N + t) * (H * d) + h * d + j};
  };
  Tensor<T> out(Shape{B * N, H * d});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t t = 0; t < N; ++t)
        for (std::size_t j = 0; j < d; ++j) {
          auto [src, dst] = index(b, h, t, j);
          out[dst] = x.value()[src];
        }
  return Var<T>::make(std::move(out), {x}, [x, B, H, N, d, index](const Tensor<T>& g) {
    auto& gx = x.grad_buffer();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t t = 0; t < N; ++t)
          for (std::size_t j = 0; j < d; ++j) {
            auto [src, dst] = index(b, h, t, j);
            gx[src] += g[dst];
          }
  });
}

/// Drops token 0 along axis 2 of a [batch, heads, tokens, d] tensor.
template <typename T>
Var<T> drop_first_token(const Var<T>& x) {
  detail::expect_rank(x.shape(), 4, "drop_first_token");
  const std::size_t B = x.shape()[0], H = x.shape()[1], T1 = x.shape()[2], d = x.shape()[3];
  if (T1 < 2) throw ConfigError("drop_first_token: need at least two tokens");
  const std::size_t rows = B * H;
  Tensor<T> out(Shape{B, H, T1 - 1, d});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.value().ptr() + (r * T1 + 1) * d, (T1 - 1) * d, out.ptr() + r * (T1 - 1) * d);
  return Var<T>::make(std::move(out), {x}, [x, rows, T1, d](const Tensor<T>& g) {
    auto& gx = x.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < (T1 - 1) * d; ++i) gx[(r * T1 + 1) * d + i] += g[r * (T1 - 1) * d + i];
  });
}

/// [B, C, S, S] image -> [B * N, C * P * P] patch rows, patches in raster order,
/// each row flattened channel-major (c, y, x).
template <typename T>
Var<T> patchify(const Var<T>& image, std::size_t patch) {
  detail::expect_rank(image.shape(), 4, "patchify");
  const std::size_t B = image.shape()[0], C = image.shape()[1], S = image.shape()[2];
  if (image.shape()[3] != S || S % patch != 0)
    throw ConfigError("patchify: image " + shape_string(image.shape()) + " not tileable by patch " +
                      std::to_string(patch));
  const std::size_t G = S / patch, N = G * G, W = C * patch * patch;
  std::vector<std::size_t> src_index(B * N * W);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t gy = 0; gy < G; ++gy)
      for (std::size_t gx = 0; gx < G; ++gx)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t y = 0; y < patch; ++y)
            for (std::size_t x = 0; x < patch; ++x) {
              const std::size_t row = b * N + gy * G + gx;
              const std::size_t col = (c * patch + y) * patch + x;
              src_index[row * W + col] = ((b * C + c) * S + gy * patch + y) * S + gx * patch + x;
            }
  Tensor<T> out(Shape{B * N, W});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = image.value()[src_index[i]];
  return Var<T>::make(std::move(out), {image}, [image, src_index = std::move(src_index)](const Tensor<T>& g) {
    auto& gi = image.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gi[src_index[i]] += g[i];
  });
}

/// Prepends the class token to each image's patch tokens and adds positional
/// embeddings. patches: [B * N, D], cls: [D], pos: [N + 1, D] -> [B * (N + 1), D].
template <typename T>
Var<T> assemble_tokens(const Var<T>& patches, const Var<T>& cls, const Var<T>& pos, std::size_t batch) {
  detail::expect_rank(patches.shape(), 2, "assemble_tokens");
  const std::size_t D = patches.shape()[1];
  const std::size_t N = patches.shape()[0] / batch;
  if (N * batch != patches.shape()[0] || cls.size() != D || pos.size() != (N + 1) * D)
    throw ConfigError("assemble_tokens: inconsistent token geometry");
  const std::size_t T1 = N + 1;
  Tensor<T> out(Shape{batch * T1, D});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < T1; ++t)
      for (std::size_t j = 0; j < D; ++j) {
        const T base = t == 0 ? cls.value()[j] : patches.value()[(b * N + t - 1) * D + j];
        out[(b * T1 + t) * D + j] = base + pos.value()[t * D + j];
      }
  return Var<T>::make(std::move(out), {patches, cls, pos}, [patches, cls, pos, batch, N, T1, D](const Tensor<T>& g) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < T1; ++t)
        for (std::size_t j = 0; j < D; ++j) {
          const T gv = g[(b * T1 + t) * D + j];
          if (pos.requires_grad()) pos.grad_buffer()[t * D + j] += gv;
          if (t == 0) {
            if (cls.requires_grad()) cls.grad_buffer()[j] += gv;
          } else if (patches.requires_grad()) {
            patches.grad_buffer()[(b * N + t - 1) * D + j] += gv;
          }
        }
  });
}

/// Picks row 0 of each of `batch` consecutive token blocks: [B * T, D] -> [B, D].
template <typename T>
Var<T> first_token(const Var<T>& x, std::size_t batch) {
  detail::expect_rank(x.shape(), 2, "first_token");
  const std::size_t T1 = x.shape()[0] / batch, D = x.shape()[1];
  Tensor<T> out(Shape{batch, D});
  for (std::size_t b = 0; b < batch; ++b) std::copy_n(x.value().ptr() + b * T1 * D, D, out.ptr() + b * D);
  return Var<T>::make(std::move(out), {x}, [x, batch, T1, D](const Tensor<T>& g) {
    auto& gx = x.grad_buffer();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < D; ++j) gx[b * T1 * D + j] += g[b * D + j];
  });
}

/// Mean cross-entropy of softmax(logits) against integer targets. logits: [B, C].
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets) {
  detail::expect_rank(logits.shape(), 2, "cross_entropy");
  const std::size_t B = logits.shape()[0], C = logits.shape()[1];
  if (targets.size() != B) throw ConfigError("cross_entropy: one target per row required");
  for (int t : targets)
    if (t < 0 || static_cast<std::size_t>(t) >= C) throw ContractError("cross_entropy: target out of range");
  Tensor<T> probs = logits.value();
  softmax_rows(probs.data(), B, C);
  T loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = logits.value().ptr() + b * C;
    T mx = row[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    T s = 0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(row[c] - mx);
    loss += (std::log(s) + mx) - row[targets[b]];
  }
  loss /= static_cast<T>(B);
  std::vector<int> tgt(targets.begin(), targets.end());
  return Var<T>::make(Tensor<T>(Shape{}, loss), {logits},
                      [logits, probs = std::move(probs), tgt = std::move(tgt), B, C](const Tensor<T>& g) {
                        auto& gl = logits.grad_buffer();
                        const T s = g[0] / static_cast<T>(B);
                        for (std::size_t b = 0; b < B; ++b)
                          for (std::size_t c = 0; c < C; ++c)
                            gl[b * C + c] += s * (probs[b * C + c] - (static_cast<int>(c) == tgt[b] ? T(1) : T(0)));
                      });
}

}  // namespace dfq::ops
