#pragma once

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "dfq/pipeline/quantized_model.hpp"

namespace dfq::pipeline {

/// Quant-param table: weights and activation sites keyed by name.
inline nlohmann::json quant_table_json(const QuantizedModel<float>& q) {
  nlohmann::json sites = nlohmann::json::object();
  for (const auto& [name, qp] : q.quant_table()) sites[name] = qp;
  return {{"format", "dfq-quant-table"},
          {"version", 1},
          {"weight_bits", q.config().weight_bits},
          {"act_bits", q.config().act_bits},
          {"strategy", quant::to_string(q.config().strategy)},
          {"quantize_attention_probs", q.config().quantize_attention_probs},
          {"sites", sites}};
}

inline void write_quant_table(const QuantizedModel<float>& q, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot open " + path.string() + " for writing");
  out << quant_table_json(q).dump(2) << '\n';
}

/// A quant table read back from disk.
struct StoredQuantTable {
  QuantConfig config;  // bit widths, strategy and probability-site flag as written
  QuantTable sites;
};

inline StoredQuantTable read_quant_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open quant table " + path.string());
  StoredQuantTable t;
  try {
    const auto j = nlohmann::json::parse(in);
    j.at("weight_bits").get_to(t.config.weight_bits);
    j.at("act_bits").get_to(t.config.act_bits);
    t.config.strategy = quant::parse_strategy(j.at("strategy").get<std::string>());
    j.at("quantize_attention_probs").get_to(t.config.quantize_attention_probs);
    for (const auto& [name, qp] : j.at("sites").items()) t.sites.emplace(name, qp.get<QuantParams>());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed quant table " + path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw LoadError("invalid entry in quant table " + path.string() + ": " + e.what());
  }
  return t;
}

/// Rebuilds the calibrated model a table was written from. The weight entries
/// must match what wrapping `model` produces.
inline QuantizedModel<float> restore_quantized(const vit::Model<float>& model, const StoredQuantTable& stored) {
  QuantizedModel<float> q(model, stored.config);
  for (const auto& [name, qp] : q.weight_params())
    if (auto it = stored.sites.find(name); it == stored.sites.end() || it->second != qp)
      throw ConfigError("quant table weight entry " + name + " does not match this model");
  QuantTable acts;
  for (const auto& name : q.site_names())
    if (auto it = stored.sites.find(name); it != stored.sites.end()) acts.emplace(name, it->second);
  q.set_activation_params(std::move(acts));
  return q;
}

}  // namespace dfq::pipeline
