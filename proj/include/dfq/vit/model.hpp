#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dfq/core/ops.hpp"
#include "dfq/vit/params.hpp"

namespace dfq::vit {

/// Matmul operand sites inside an encoder block, in forward order.
enum class SiteKind { qkv_input, query, key, value, attn_probs, proj_input, fc1_input, fc2_input };

inline const char* site_suffix(SiteKind k) {
  switch (k) {
    case SiteKind::qkv_input: return "attn.qkv_in";
    case SiteKind::query: return "attn.q";
    case SiteKind::key: return "attn.k";
    case SiteKind::value: return "attn.v";
    case SiteKind::attn_probs: return "attn.probs";
    case SiteKind::proj_input: return "attn.proj_in";
    case SiteKind::fc1_input: return "mlp.fc1_in";
    case SiteKind::fc2_input: return "mlp.fc2_in";
  }
  return "?";
}

struct Site {
  std::size_t layer = 0;  // 0-based; printed 1-based
  SiteKind kind = SiteKind::qkv_input;

  std::string name() const { return "layer" + std::to_string(layer + 1) + "." + site_suffix(kind); }
};

/// Called with every activation site's values during the forward pass.
template <typename T>
using SiteHook = std::function<void(const Site&, Tensor<T>&)>;

/// Per-layer, per-head attention outputs [B, H, N, d] with the class token removed.
template <typename T>
struct AttentionTrace {
  std::vector<Var<T>> layers;
};

template <typename T>
struct ForwardResult {
  Var<T> logits;
  std::optional<AttentionTrace<T>> trace;
};

template <typename T>
struct ForwardOptions {
  bool capture = false;
  SiteHook<T> hook;
  bool hook_attention_probs = false;
};

/// A configuration plus weights. Default-constructed models are unloaded.
template <typename T>
class Model {
 public:
  Model() = default;
  Model(ModelConfig config, ParameterSet<T> params) : config_(config), params_(std::move(params)), loaded_(true) {
    config_.validate();
    check_shapes();
  }

  bool loaded() const noexcept { return loaded_; }
  const ModelConfig& config() const noexcept { return config_; }
  const ParameterSet<T>& params() const noexcept { return params_; }

 private:
  void check_shapes() const {
    const auto shapes = expected_shapes(config_);
    std::size_t i = 0;
    if (params_.blocks.size() != config_.num_layers) throw ConfigError("parameter set has wrong number of layers");
    params_.for_each([&](const std::string& name, const Tensor<T>& t, bool) {
      if (t.shape() != shapes[i].second)
        throw ConfigError("tensor " + name + " has shape " + shape_string(t.shape()) + ", expected " +
                          shape_string(shapes[i].second));
      ++i;
    });
  }

  ModelConfig config_;
  ParameterSet<T> params_;
  bool loaded_ = false;
};

/// Patch projection, class token and positional embeddings: [B, 3, S, S] -> [B * (N + 1), D].
template <typename T>
Var<T> patch_embed(const ModelConfig& config, const ParamsOf<Var<T>>& p, const Var<T>& image) {
  const Shape expect{image.shape().empty() ? 0 : image.shape()[0], config.channels, config.image_side,
                     config.image_side};
  if (image.shape().size() != 4 || image.shape() != expect)
    throw ConfigError("image shape " + shape_string(image.shape()) + " does not match model geometry " +
                      shape_string(expect));
  const std::size_t batch = image.shape()[0];
  auto patches = ops::patchify(image, config.patch_size);
  auto projected = ops::linear(patches, p.patch_w, p.patch_b);
  return ops::assemble_tokens(projected, p.cls_token, p.pos_embed, batch);
}

namespace detail {

template <typename T>
Var<T> at_site(const Var<T>& x, std::size_t layer, SiteKind kind, const ForwardOptions<T>& opt) {
  if (!opt.hook) return x;
  const Site site{layer, kind};
  return ops::hook<T>(x, [&](Tensor<T>& t) { opt.hook(site, t); });
}

}  // namespace detail

/// Pre-norm encoder block. Returns the updated tokens; when `per_head_out` is
/// non-null it receives the per-head attention outputs [B, H, N+1, d].
template <typename T>
Var<T> encoder_block(const ModelConfig& config, const BlockOf<Var<T>>& b, std::size_t layer, const Var<T>& tokens,
                     std::size_t batch, const ForwardOptions<T>& opt, Var<T>* per_head_out = nullptr) {
  using namespace ops;
  const std::size_t T1 = config.num_tokens();
  auto h = layer_norm(tokens, b.norm1_w, b.norm1_b);
  h = detail::at_site(h, layer, SiteKind::qkv_input, opt);
  auto q = detail::at_site(linear(h, b.q_w, b.q_b), layer, SiteKind::query, opt);
  auto k = detail::at_site(linear(h, b.k_w, b.k_b), layer, SiteKind::key, opt);
  auto v = detail::at_site(linear(h, b.v_w, b.v_b), layer, SiteKind::value, opt);
  std::function<void(Tensor<T>&)> probs_hook;
  if (opt.hook && opt.hook_attention_probs) {
    const Site site{layer, SiteKind::attn_probs};
    probs_hook = [&opt, site](Tensor<T>& t) { opt.hook(site, t); };
  }
  auto heads = attention(q, k, v, batch, T1, config.num_heads, probs_hook);
  if (per_head_out) *per_head_out = heads;
  auto merged = detail::at_site(merge_heads(heads), layer, SiteKind::proj_input, opt);
  auto x = add(tokens, linear(merged, b.proj_w, b.proj_b));
  auto m = detail::at_site(layer_norm(x, b.norm2_w, b.norm2_b), layer, SiteKind::fc1_input, opt);
  m = detail::at_site(gelu(linear(m, b.fc1_w, b.fc1_b)), layer, SiteKind::fc2_input, opt);
  return add(x, linear(m, b.fc2_w, b.fc2_b));
}

/// Full forward pass on explicit parameter Vars. Differentiable with respect to
/// both the image and any parameter Var that requires gradients.
template <typename T>
ForwardResult<T> forward(const ModelConfig& config, const ParamsOf<Var<T>>& p, const Var<T>& image,
                         const ForwardOptions<T>& opt = {}) {
  auto tokens = patch_embed(config, p, image);
  const std::size_t batch = image.shape()[0];
  ForwardResult<T> result;
  if (opt.capture) result.trace.emplace();
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    Var<T> heads;
    tokens = encoder_block(config, p.blocks[l], l, tokens, batch, opt, opt.capture ? &heads : nullptr);
    if (opt.capture) result.trace->layers.push_back(ops::drop_first_token(heads));
  }
  auto normed = ops::layer_norm(tokens, p.norm_w, p.norm_b);
  result.logits = ops::linear(ops::first_token(normed, batch), p.head_w, p.head_b);
  return result;
}

/// Forward pass through a frozen model; gradients flow only to `image`.
template <typename T>
ForwardResult<T> forward_with_trace(const Model<T>& model, const Var<T>& image, bool capture,
                                    const SiteHook<T>& hook = {}, bool hook_attention_probs = false) {
  if (!model.loaded()) throw StateError("forward on an unloaded model");
  ForwardOptions<T> opt{capture, hook, hook_attention_probs};
  return forward(model.config(), as_vars(model.params(), false), image, opt);
}

template <typename T>
ForwardResult<T> forward_with_trace(const Model<T>& model, const Tensor<T>& image, bool capture) {
  return forward_with_trace(model, Var<T>::leaf(image, false), capture);
}

}  // namespace dfq::vit
