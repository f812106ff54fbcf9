#pragma once

#include "qmamba/calibration.hpp"
#include "qmamba/quant.hpp"
#include "qmamba/ssm.hpp"
#include "qmamba/tensor.hpp"

#include <json.hpp>

#include <string>

namespace qmamba {

using json = nlohmann::ordered_json;

// Tensor blobs are flat little-endian f32 with a JSON sidecar
// {"shape":[...], "dtype":"f32", "order":"row-major"} at <path>.json.
void save_tensor(const Tensor& t, const std::string& path);
Tensor load_tensor(const std::string& path);

json quant_params_to_json(const QuantParams& p);
QuantParams quant_params_from_json(const json& j);

json assignment_to_json(const QuantizerAssignment& qa);
QuantizerAssignment assignment_from_json(const json& j);

json calib_stats_to_json(const CalibStats& s);

// Model weights: a JSON manifest listing named tensors plus one blob per
// tensor in the directory next to it.
void save_classifier(const MambaClassifier& m, const std::string& dir);
MambaClassifier load_classifier(const std::string& dir);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

uint64_t fnv1a_hash(const std::string& bytes);

// Minimal TOML reader covering the config subset used by the CLI:
// [table] headers, key = value with strings, integers, floats, booleans
// and flat arrays, '#' comments. Returns the equivalent JSON object.
json parse_toml_lite(const std::string& text);

// Loads a config file as JSON, dispatching on extension (.toml vs .json).
json load_config_file(const std::string& path);

} // namespace qmamba
