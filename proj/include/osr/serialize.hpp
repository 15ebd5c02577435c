#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "osr/nn.hpp"

namespace osr::serialize {

using json = nlohmann::json;

/// MlpSpec <-> JSON (layer list with widths, activation names, flags).
json spec_to_json(const nn::MlpSpec& spec);
nn::MlpSpec spec_from_json(const json& j);

/// Parameters as an ordered list of named arrays with explicit shapes.
/// nlohmann serializes doubles with a shortest round-trip encoding, so
/// save -> load reproduces every entry bit-exactly.
json params_to_json(const nn::MlpSpec& spec, const nn::MlpParams& params);
nn::MlpParams params_from_json(const nn::MlpSpec& spec, const json& j);

json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const json& j);

void write_json_file(const std::filesystem::path& path, const json& j);
json read_json_file(const std::filesystem::path& path);

/// Shortest round-trip decimal encoding of a double (used for CSV cells).
std::string format_double(double v);

}  // namespace osr::serialize
