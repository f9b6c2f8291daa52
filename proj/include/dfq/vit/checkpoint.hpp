#pragma once

// Checkpoint = JSON manifest (config + tensor name -> shape, dtype, byte offset)
// next to one little-endian float32 blob.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "dfq/vit/model.hpp"

namespace dfq::vit {

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are little-endian");

inline std::filesystem::path blob_path_for(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& manifest_path) {
  if (!model.loaded()) throw StateError("save_checkpoint: model is not loaded");
  const auto blob_path = detail::blob_path_for(manifest_path);
  std::ofstream blob(blob_path, std::ios::binary);
  if (!blob) throw LoadError("cannot open " + blob_path.string() + " for writing");

  nlohmann::json manifest;
  manifest["format"] = "dfq-vit-checkpoint";
  manifest["version"] = 1;
  manifest["config"] = model.config();
  manifest["blob"] = blob_path.filename().string();
  nlohmann::json tensors = nlohmann::json::object();
  std::uint64_t offset = 0;
  model.params().for_each([&](const std::string& name, const Tensor<T>& t, bool) {
    std::vector<float> buf(t.data().begin(), t.data().end());
    blob.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    tensors[name] = {{"shape", t.shape()}, {"dtype", "f32"}, {"offset", offset}};
    offset += buf.size() * sizeof(float);
  });
  manifest["tensors"] = tensors;
  if (!blob) throw LoadError("write failed: " + blob_path.string());
  std::ofstream(manifest_path) << manifest.dump(2) << '\n';
}

template <typename T = float>
Model<T> load_checkpoint(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw LoadError("cannot open checkpoint manifest " + manifest_path.string());
  nlohmann::json manifest;
  ModelConfig config;
  try {
    in >> manifest;
    config = manifest.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed checkpoint manifest " + manifest_path.string() + ": " + e.what());
  }
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw LoadError(e.what());
  }

  const auto blob_path = manifest_path.parent_path() / manifest.value("blob", detail::blob_path_for(manifest_path).filename().string());
  std::ifstream blob(blob_path, std::ios::binary | std::ios::ate);
  if (!blob) throw LoadError("cannot open checkpoint blob " + blob_path.string());
  const auto blob_size = static_cast<std::uint64_t>(blob.tellg());

  const auto& tensors = manifest.value("tensors", nlohmann::json::object());
  ParameterSet<T> params = zero_parameters<T>(config);
  params.for_each([&](const std::string& name, Tensor<T>& t, bool) {
    if (!tensors.contains(name)) throw LoadError("checkpoint is missing tensor " + name);
    const auto& entry = tensors.at(name);
    Shape shape;
    std::uint64_t offset = 0;
    try {
      shape = entry.at("shape").get<Shape>();
      offset = entry.at("offset").get<std::uint64_t>();
      if (entry.at("dtype").get<std::string>() != "f32") throw LoadError("tensor " + name + " has unsupported dtype");
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("bad manifest entry for tensor " + name + ": " + e.what());
    }
    if (shape != t.shape())
      throw LoadError("tensor " + name + " has shape " + shape_string(shape) + ", config requires " +
                      shape_string(t.shape()));
    const std::uint64_t bytes = t.size() * sizeof(float);
    if (offset + bytes > blob_size)
      throw LoadError("tensor " + name + " extends past the end of the blob (corrupt or truncated)");
    std::vector<float> buf(t.size());
    blob.seekg(static_cast<std::streamoff>(offset));
    blob.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
    if (!blob) throw LoadError("failed reading tensor " + name);
    std::copy(buf.begin(), buf.end(), t.data().begin());
  });
  return Model<T>(config, std::move(params));
}

}  // namespace dfq::vit
