#pragma once

#include <string>

#include <json.hpp>

#include "fednorm/model.hpp"

namespace fednorm {

using Json = nlohmann::ordered_json;

Json to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const Json& j);

Json to_json(const ParamSet& params);
ParamSet params_from_json(const Json& j);

/// Checkpoint text: {"format": "fednorm-checkpoint", "version": 1, "spec": ..., "params": [...]}.
/// Doubles are written in shortest round-trip form, so the text is
/// byte-stable for a fixed model.
std::string checkpoint_string(const Model& model);
Model model_from_checkpoint_string(const std::string& text);
void save_checkpoint(const std::string& path, const Model& model);
/// Throws FormatError for unreadable or malformed files.
Model load_checkpoint(const std::string& path);

}  // namespace fednorm
