#pragma once

#include <json.hpp>

#include "vitprune/model.hpp"

namespace vp {

using Json = nlohmann::json;

// Width fields accept either a scalar (uniform) or a per-layer array;
// serialization always writes per-layer arrays.
void to_json(Json& j, const ModelConfig& c);
void from_json(const Json& j, ModelConfig& c);

ModelConfig model_config_from_json(const Json& j);

/// Stable text form: sorted keys, fixed indent, trailing newline.
std::string dump_stable(const Json& j);

/// "HH:MM:SS" for a duration in seconds.
std::string format_hms(double seconds);

}  // namespace vp
