#pragma once

#include <json.hpp>

#include "diffabm/epi.hpp"
#include "diffabm/population.hpp"

namespace diffabm {

/// Population schema: {"agent_count": N, "susceptibility": [..],
/// "locations": [{"type": name, "groups": [[agent ids...], ...]}, ...]}.
nlohmann::json population_to_json(const Population& pop);
Population population_from_json(const nlohmann::json& j);

/// Parameter schema: {"contact_intensity": {name: beta, ...},
/// "initial_infected_fraction": f}.
nlohmann::json epi_params_to_json(const EpiParams& params);
EpiParams epi_params_from_json(const nlohmann::json& j);

}  // namespace diffabm
