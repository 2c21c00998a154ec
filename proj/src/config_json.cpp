#include "dermcbm/config_json.hpp"

#include <set>
#include <string>

#include "dermcbm/errors.hpp"

namespace dermcbm {

namespace {

using json = nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& allowed, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.contains(key)) {
      throw ConfigError(std::string("unknown key \"") + key + "\" in " + what);
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const char* what) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(what) + "." + key + " has the wrong type");
  }
}

}  // namespace

json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"lr_patience", c.lr_patience},
          {"lr_factor", c.lr_factor},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"early_stop_patience", c.early_stop_patience},
          {"seed", c.seed},
          {"weight_decay", c.weight_decay},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_epsilon", c.adam_epsilon},
          {"logit_scale", c.logit_scale},
          {"init_noise", c.init_noise}};
}

TrainConfig train_config_from_json(const json& j) {
  constexpr const char* what = "train config";
  reject_unknown(j,
                 {"learning_rate", "lr_patience", "lr_factor", "batch_size", "max_epochs",
                  "early_stop_patience", "seed", "weight_decay", "adam_beta1", "adam_beta2",
                  "adam_epsilon", "logit_scale", "init_noise"},
                 what);
  TrainConfig c;
  read(j, "learning_rate", c.learning_rate, what);
  read(j, "lr_patience", c.lr_patience, what);
  read(j, "lr_factor", c.lr_factor, what);
  read(j, "batch_size", c.batch_size, what);
  read(j, "max_epochs", c.max_epochs, what);
  read(j, "early_stop_patience", c.early_stop_patience, what);
  read(j, "seed", c.seed, what);
  read(j, "weight_decay", c.weight_decay, what);
  read(j, "adam_beta1", c.adam_beta1, what);
  read(j, "adam_beta2", c.adam_beta2, what);
  read(j, "adam_epsilon", c.adam_epsilon, what);
  read(j, "logit_scale", c.logit_scale, what);
  read(j, "init_noise", c.init_noise, what);
  c.validate();
  return c;
}

json to_json(const FitConfig& c) {
  return {{"max_iterations", c.max_iterations},
          {"tolerance", c.tolerance},
          {"l2_strength", c.l2_strength}};
}

FitConfig fit_config_from_json(const json& j) {
  constexpr const char* what = "fit config";
  reject_unknown(j, {"max_iterations", "tolerance", "l2_strength"}, what);
  FitConfig c;
  read(j, "max_iterations", c.max_iterations, what);
  read(j, "tolerance", c.tolerance, what);
  read(j, "l2_strength", c.l2_strength, what);
  c.validate();
  return c;
}

}  // namespace dermcbm
