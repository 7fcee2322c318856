// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>

#include "json.hpp"
#include "kdlsq/transformer.hpp"

namespace kdlsq {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "kdlsq-checkpoint";

nlohmann::json model_config_to_json(const ModelConfig& config);
/// Missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Self-describing document: format tag, version, model config, and for every
/// parameter its dotted name, shape, row-major values and (for weight sites)
/// the scale-factor. Activation-site scales are stored separately by site id.
/// Values round-trip bit-exactly.
nlohmann::json checkpoint_to_json(const ModelState& model);
/// Throws std::runtime_error on a format/version mismatch or a missing or
/// mis-shaped parameter.
ModelState checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const ModelState& model, const std::filesystem::path& path);
ModelState load_checkpoint(const std::filesystem::path& path);

}  // namespace kdlsq
