#pragma once

#include <cstddef>
#include <string>

#include <nlohmann/json.hpp>

#include "dfq/core/error.hpp"

namespace dfq::vit {

/// Architecture hyper-parameters of a plain ViT/DeiT-style classifier.
struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t head_dim = 4;
  std::size_t patch_size = 8;
  std::size_t image_side = 32;
  std::size_t num_classes = 10;
  std::size_t mlp_hidden = 16;
  std::size_t channels = 3;

  std::size_t hidden_size() const noexcept { return num_heads * head_dim; }
  std::size_t grid_side() const noexcept { return patch_size ? image_side / patch_size : 0; }
  std::size_t num_patches() const noexcept { return grid_side() * grid_side(); }
  std::size_t num_tokens() const noexcept { return num_patches() + 1; }
  std::size_t patch_width() const noexcept { return channels * patch_size * patch_size; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("model config: ") + name + " must be positive");
    };
    positive(num_layers, "num_layers");
    positive(num_heads, "num_heads");
    positive(head_dim, "head_dim");
    positive(patch_size, "patch_size");
    positive(image_side, "image_side");
    positive(num_classes, "num_classes");
    positive(mlp_hidden, "mlp_hidden");
    positive(channels, "channels");
    if (image_side % patch_size != 0)
      throw ConfigError("model config: image_side " + std::to_string(image_side) + " not divisible by patch_size " +
                        std::to_string(patch_size));
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Two-layer configuration used by the gradient and oracle tests.
inline ModelConfig tiny_config() { return ModelConfig{}; }

/// Configuration trained on the bundled shapes dataset.
inline ModelConfig toy_config() {
  ModelConfig c;
  c.num_layers = 4;
  c.num_heads = 4;
  c.head_dim = 8;
  c.patch_size = 8;
  c.image_side = 32;
  c.num_classes = 10;
  c.mlp_hidden = 64;
  return c;
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"num_layers", c.num_layers}, {"num_heads", c.num_heads},   {"head_dim", c.head_dim},
                     {"patch_size", c.patch_size}, {"image_side", c.image_side}, {"num_classes", c.num_classes},
                     {"mlp_hidden", c.mlp_hidden}, {"channels", c.channels}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("num_layers").get_to(c.num_layers);
  j.at("num_heads").get_to(c.num_heads);
  j.at("head_dim").get_to(c.head_dim);
  j.at("patch_size").get_to(c.patch_size);
  j.at("image_side").get_to(c.image_side);
  j.at("num_classes").get_to(c.num_classes);
  j.at("mlp_hidden").get_to(c.mlp_hidden);
  c.channels = j.value("channels", std::size_t{3});
}

}  // namespace dfq::vit
