#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "dfq/core/autograd.hpp"
#include "dfq/vit/config.hpp"

namespace dfq::vit {

/// Weights of one encoder block. Linear weights are [out, in]; the per-head
/// projections W_i^Q/K/V are stacked head-major along the output axis.
template <typename X>
struct BlockOf {
  X norm1_w, norm1_b;
  X q_w, q_b, k_w, k_b, v_w, v_b;
  X proj_w, proj_b;
  X norm2_w, norm2_b;
  X fc1_w, fc1_b, fc2_w, fc2_b;

  /// f(name, tensor, is_matmul_weight)
  template <typename Self, typename F>
  static void visit(Self& b, const std::string& p, F&& f) {
    f(p + ".norm1.weight", b.norm1_w, false);
    f(p + ".norm1.bias", b.norm1_b, false);
    f(p + ".attn.q.weight", b.q_w, true);
    f(p + ".attn.q.bias", b.q_b, false);
    f(p + ".attn.k.weight", b.k_w, true);
    f(p + ".attn.k.bias", b.k_b, false);
    f(p + ".attn.v.weight", b.v_w, true);
    f(p + ".attn.v.bias", b.v_b, false);
    f(p + ".attn.proj.weight", b.proj_w, true);
    f(p + ".attn.proj.bias", b.proj_b, false);
    f(p + ".norm2.weight", b.norm2_w, false);
    f(p + ".norm2.bias", b.norm2_b, false);
    f(p + ".mlp.fc1.weight", b.fc1_w, true);
    f(p + ".mlp.fc1.bias", b.fc1_b, false);
    f(p + ".mlp.fc2.weight", b.fc2_w, true);
    f(p + ".mlp.fc2.bias", b.fc2_b, false);
  }

  friend bool operator==(const BlockOf&, const BlockOf&) = default;
};

/// Full parameter set. Blocks are named layer1..layerL.
template <typename X>
struct ParamsOf {
  X patch_w, patch_b;
  X cls_token, pos_embed;
  std::vector<BlockOf<X>> blocks;
  X norm_w, norm_b;
  X head_w, head_b;

  template <typename F>
  void for_each(F&& f) {
    visit_all(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit_all(*this, f);
  }

  friend bool operator==(const ParamsOf&, const ParamsOf&) = default;

 private:
  template <typename Self, typename F>
  static void visit_all(Self& s, F& f) {
    f(std::string("patch_embed.weight"), s.patch_w, false);
    f(std::string("patch_embed.bias"), s.patch_b, false);
    f(std::string("cls_token"), s.cls_token, false);
    f(std::string("pos_embed"), s.pos_embed, false);
    for (std::size_t l = 0; l < s.blocks.size(); ++l)
      BlockOf<X>::visit(s.blocks[l], "layer" + std::to_string(l + 1), f);
    f(std::string("norm.weight"), s.norm_w, false);
    f(std::string("norm.bias"), s.norm_b, false);
    f(std::string("head.weight"), s.head_w, false);
    f(std::string("head.bias"), s.head_b, false);
  }
};

template <typename T>
using ParameterSet = ParamsOf<Tensor<T>>;

/// Expected shape of every named tensor for `config`.
inline std::vector<std::pair<std::string, Shape>> expected_shapes(const ModelConfig& c) {
  const std::size_t D = c.hidden_size();
  std::vector<std::pair<std::string, Shape>> out{{"patch_embed.weight", {D, c.patch_width()}},
                                                 {"patch_embed.bias", {D}},
                                                 {"cls_token", {D}},
                                                 {"pos_embed", {c.num_tokens(), D}}};
  for (std::size_t l = 1; l <= c.num_layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    for (const auto& [n, s] : std::vector<std::pair<std::string, Shape>>{
             {".norm1.weight", {D}},
             {".norm1.bias", {D}},
             {".attn.q.weight", {D, D}},
             {".attn.q.bias", {D}},
             {".attn.k.weight", {D, D}},
             {".attn.k.bias", {D}},
             {".attn.v.weight", {D, D}},
             {".attn.v.bias", {D}},
             {".attn.proj.weight", {D, D}},
             {".attn.proj.bias", {D}},
             {".norm2.weight", {D}},
             {".norm2.bias", {D}},
             {".mlp.fc1.weight", {c.mlp_hidden, D}},
             {".mlp.fc1.bias", {c.mlp_hidden}},
             {".mlp.fc2.weight", {D, c.mlp_hidden}},
             {".mlp.fc2.bias", {D}}})
      out.emplace_back(p + n, s);
  }
  out.emplace_back("norm.weight", Shape{D});
  out.emplace_back("norm.bias", Shape{D});
  out.emplace_back("head.weight", Shape{c.num_classes, D});
  out.emplace_back("head.bias", Shape{c.num_classes});
  return out;
}

/// Zero-filled parameter set with every tensor shaped for `config`.
template <typename T>
ParameterSet<T> zero_parameters(const ModelConfig& config) {
  config.validate();
  ParameterSet<T> p;
  p.blocks.resize(config.num_layers);
  const auto shapes = expected_shapes(config);
  std::size_t i = 0;
  p.for_each([&](const std::string&, Tensor<T>& t, bool) { t = Tensor<T>(shapes[i++].second); });
  return p;
}

/// Random initialisation: Xavier-uniform linear weights, N(0, 0.02) embeddings,
/// unit layer-norm scales, zero biases.
template <typename T>
ParameterSet<T> init_parameters(const ModelConfig& config, std::uint64_t seed) {
  ParameterSet<T> p = zero_parameters<T>(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> embed(0.0, 0.02);
  p.for_each([&](const std::string& name, Tensor<T>& t, bool) {
    const bool is_norm_scale = name.find("norm") != std::string::npos && name.ends_with(".weight");
    if (is_norm_scale) {
      t.fill(T(1));
    } else if (name == "cls_token" || name == "pos_embed") {
      for (auto& v : t.data()) v = static_cast<T>(embed(rng));
    } else if (name.ends_with(".weight")) {
      const double fan_out = static_cast<double>(t.dim(0)), fan_in = static_cast<double>(t.dim(1));
      const double a = std::sqrt(6.0 / (fan_in + fan_out));
      std::uniform_real_distribution<double> u(-a, a);
      for (auto& v : t.data()) v = static_cast<T>(u(rng));
    }
  });
  return p;
}

template <typename U, typename T>
ParameterSet<U> cast_parameters(const ParameterSet<T>& src) {
  ParameterSet<U> out;
  out.blocks.resize(src.blocks.size());
  std::vector<const Tensor<T>*> flat;
  src.for_each([&](const std::string&, const Tensor<T>& t, bool) { flat.push_back(&t); });
  std::size_t i = 0;
  out.for_each([&](const std::string&, Tensor<U>& t, bool) { t = flat[i++]->template cast<U>(); });
  return out;
}

/// Wraps each tensor in a leaf Var.
template <typename T>
ParamsOf<Var<T>> as_vars(const ParameterSet<T>& src, bool requires_grad) {
  ParamsOf<Var<T>> out;
  out.blocks.resize(src.blocks.size());
  std::vector<const Tensor<T>*> flat;
  src.for_each([&](const std::string&, const Tensor<T>& t, bool) { flat.push_back(&t); });
  std::size_t i = 0;
  out.for_each([&](const std::string&, Var<T>& v, bool) { v = Var<T>::leaf(*flat[i++], requires_grad); });
  return out;
}

}  // namespace dfq::vit
