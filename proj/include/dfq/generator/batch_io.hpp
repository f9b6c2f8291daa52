#pragma once

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "dfq/core/png.hpp"
#include "dfq/generator/generator.hpp"

namespace dfq::gen {

inline void to_json(nlohmann::json& j, const GenConfig& c) {
  j = {{"batch_size", c.batch_size},
       {"steps", c.steps},
       {"lr", c.lr},
       {"seed", c.seed},
       {"weights", c.weights},
       {"use_pse", c.use_pse},
       {"labels", c.labels},
       {"entropy",
        {{"grid_points", c.entropy.grid_points},
         {"max_points", c.entropy.max_points},
         {"subsample_seed", c.entropy.subsample_seed}}}};
}

inline void from_json(const nlohmann::json& j, GenConfig& c) {
  j.at("batch_size").get_to(c.batch_size);
  j.at("steps").get_to(c.steps);
  j.at("lr").get_to(c.lr);
  j.at("seed").get_to(c.seed);
  j.at("weights").get_to(c.weights);
  j.at("use_pse").get_to(c.use_pse);
  j.at("labels").get_to(c.labels);
  const auto& e = j.at("entropy");
  e.at("grid_points").get_to(c.entropy.grid_points);
  e.at("max_points").get_to(c.entropy.max_points);
  e.at("subsample_seed").get_to(c.entropy.subsample_seed);
}

inline void to_json(nlohmann::json& j, const LossRecord& r) {
  j = {{"total", r.total}, {"pse", r.pse}, {"one_hot", r.one_hot}, {"tv", r.tv}};
}

inline void from_json(const nlohmann::json& j, LossRecord& r) {
  j.at("total").get_to(r.total);
  j.at("pse").get_to(r.pse);
  j.at("one_hot").get_to(r.one_hot);
  j.at("tv").get_to(r.tv);
}

/// Per-image affine rescale to [0, 1], then 8-bit RGB (first three channels).
inline std::vector<unsigned char> preview_rgb(const Tensor<float>& images, std::size_t index) {
  const std::size_t C = images.dim(1), H = images.dim(2), W = images.dim(3), plane = H * W;
  const float* img = images.ptr() + index * C * plane;
  const auto [mn, mx] = std::minmax_element(img, img + C * plane);
  const double lo = *mn, span = *mx > *mn ? static_cast<double>(*mx) - lo : 1.0;
  std::vector<unsigned char> rgb(plane * 3);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = (static_cast<double>(img[std::min(c, C - 1) * plane + p]) - lo) / span;
      rgb[p * 3 + c] = static_cast<unsigned char>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
    }
  return rgb;
}

/// Writes `<stem>.json` (shape, labels, seed, config, loss history), `<stem>.bin`
/// (little-endian f32 images) and, when `previews`, `<stem>_<i>.png`.
inline void save_generated_batch(const GeneratedBatch<float>& batch, const std::filesystem::path& manifest_path,
                                 bool previews = true) {
  auto blob_path = manifest_path;
  blob_path.replace_extension(".bin");
  std::ofstream blob(blob_path, std::ios::binary);
  if (!blob) throw LoadError("cannot open " + blob_path.string() + " for writing");
  blob.write(reinterpret_cast<const char*>(batch.images.ptr()),
             static_cast<std::streamsize>(batch.images.size() * sizeof(float)));
  if (!blob) throw LoadError("write failed: " + blob_path.string());

  nlohmann::json j;
  j["format"] = "dfq-generated-batch";
  j["version"] = 1;
  j["shape"] = batch.images.shape();
  j["dtype"] = "f32";
  j["blob"] = blob_path.filename().string();
  j["labels"] = batch.labels;
  j["seed"] = batch.seed;
  j["config"] = batch.config;
  j["loss_history"] = batch.loss_history;
  std::ofstream(manifest_path) << j.dump(2) << '\n';

  if (previews && batch.images.rank() == 4) {
    const auto stem = manifest_path.parent_path() / manifest_path.stem();
    for (std::size_t i = 0; i < batch.images.dim(0); ++i)
      write_png_rgb(stem.string() + "_" + std::to_string(i) + ".png", batch.images.dim(3), batch.images.dim(2),
                    preview_rgb(batch.images, i));
  }
}

inline GeneratedBatch<float> load_generated_batch(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw LoadError("cannot open generated batch " + manifest_path.string());
  GeneratedBatch<float> batch;
  std::filesystem::path blob_path;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("dtype").get<std::string>() != "f32") throw LoadError("generated batch dtype must be f32");
    batch.images = Tensor<float>(j.at("shape").get<Shape>());
    j.at("labels").get_to(batch.labels);
    j.at("seed").get_to(batch.seed);
    j.at("config").get_to(batch.config);
    j.at("loss_history").get_to(batch.loss_history);
    blob_path = manifest_path.parent_path() / j.at("blob").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed generated-batch manifest " + manifest_path.string() + ": " + e.what());
  }
  if (batch.images.rank() != 4 || batch.labels.size() != batch.images.dim(0))
    throw LoadError("generated batch " + manifest_path.string() + " has inconsistent shape and labels");
  std::ifstream blob(blob_path, std::ios::binary | std::ios::ate);
  if (!blob) throw LoadError("cannot open " + blob_path.string());
  if (static_cast<std::size_t>(blob.tellg()) != batch.images.size() * sizeof(float))
    throw LoadError("image blob " + blob_path.string() + " does not match the manifest shape");
  blob.seekg(0);
  blob.read(reinterpret_cast<char*>(batch.images.ptr()), static_cast<std::streamsize>(batch.images.size() * sizeof(float)));
  return batch;
}

}  // namespace dfq::gen
