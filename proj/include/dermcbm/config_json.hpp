#pragma once

// JSON conversions for the configuration structs. Unknown keys are rejected
// so that a typo never silently falls back to a default.

#include <nlohmann/json.hpp>

#include "dermcbm/contrastive.hpp"
#include "dermcbm/head_fitting.hpp"

namespace dermcbm {

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const FitConfig& config);
FitConfig fit_config_from_json(const nlohmann::json& j);

}  // namespace dermcbm
