#pragma once

// JSON forms of the configuration structs, used by checkpoints and run manifests.
// Reading tolerates missing keys (defaults apply) but rejects unknown ones.

#include "it3d/trainer.hpp"

#include <json.hpp>

namespace it3d {

std::string shading_name(Shading s);
Shading parse_shading(const std::string& name);

void to_json(nlohmann::json& j, const DecoderConfig& c);
void from_json(const nlohmann::json& j, DecoderConfig& c);
void to_json(nlohmann::json& j, const HeadConfig& c);
void from_json(const nlohmann::json& j, HeadConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const AdamConfig& c);
void from_json(const nlohmann::json& j, AdamConfig& c);
void to_json(nlohmann::json& j, const GuidanceConfig& c);
void from_json(const nlohmann::json& j, GuidanceConfig& c);
void to_json(nlohmann::json& j, const CameraRanges& c);
void from_json(const nlohmann::json& j, CameraRanges& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace it3d
