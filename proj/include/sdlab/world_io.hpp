#pragma once

#include "sdlab/world.hpp"

#include <json.hpp>

#include <string>
#include <string_view>
#include <vector>

namespace sdlab {

/// Schema:
///   { "schedule": {"kind": "vp-linear"|"vp-cosine", "beta_min", "beta_max"},
///     "prior": [..]?,
///     "classes": [ {"label", "weights", "means", "covs"}
///                | {"label", "base_class", "corruption": op | [op, ...]} ] }
///   op = {"kind", "params": {"c"} | {"lambda", "center"?} | {"v"}}
/// Errors name the JSON path of the offending key.
World world_from_json(const nlohmann::json& j);
nlohmann::json world_to_json(const World& w);

nlohmann::json schedule_to_json(const NoiseSchedule& s);

/// Builtin names: b1, b2, b3, shift. Anything else is read as a file path.
World load_world(const std::string& name_or_path);
World builtin_world(std::string_view name);
std::vector<std::string> builtin_world_names();
bool is_builtin_world(std::string_view name);

/// Labels of the corruption classes every builtin world attaches to each
/// content class, e.g. "B:smooth+noisy".
std::vector<std::string> builtin_corruption_suffixes();

}  // namespace sdlab
