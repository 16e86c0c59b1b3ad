#pragma once

#include <string>

#include <json.hpp>

#include "fptq/transforms.hpp"

namespace fptq {

// Models and transform sets are stored as a JSON manifest (<prefix>.json)
// naming tensors and shapes, plus a companion binary file (<prefix>.bin) of
// raw little-endian floats concatenated in manifest order. f64 tensors are
// 8 bytes per value, f32 tensors 4. Round-trips are bit-exact.

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

void save_model(const ModelParams& params, const std::string& prefix);
ModelParams load_model(const std::string& prefix);

void save_transform_set(const TransformSet& set, const ModelConfig& cfg, const std::string& prefix);
TransformSet load_transform_set(const std::string& prefix, const ModelConfig& cfg);

// Raw file helpers shared by the CLI (byte-compare, existence checks).
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& contents);

}  // namespace fptq
