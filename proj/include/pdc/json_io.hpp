#pragma once

#include <json.hpp>

#include "pdc/data.hpp"
#include "pdc/metrics.hpp"
#include "pdc/trainer.hpp"
#include "pdc/volnet.hpp"

namespace pdc {

// from_json patches in place: keys absent from the JSON keep the current
// field value, so a default-constructed target yields defaults and an
// existing config can take partial overrides.

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

void to_json(nlohmann::json& j, const GeneratorParams& p);
void from_json(const nlohmann::json& j, GeneratorParams& p);

void to_json(nlohmann::json& j, const MetricsReport& r);

}  // namespace pdc

namespace pdc {
struct ExperimentSpec;
void to_json(nlohmann::json& j, const ExperimentSpec& s);
void from_json(const nlohmann::json& j, ExperimentSpec& s);
}  // namespace pdc
