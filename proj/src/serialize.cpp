#include "diffabm/serialize.hpp"

#include <stdexcept>

namespace diffabm {

nlohmann::json population_to_json(const Population& pop) {
    nlohmann::json locations = nlohmann::json::array();
    for (int lt = 0; lt < kLocationTypes; ++lt) {
        nlohmann::json groups = nlohmann::json::array();
        for (const auto& g : pop.groups[lt]) groups.push_back(g);
        locations.push_back({{"type", location_type_name(static_cast<LocationType>(lt))},
                             {"groups", std::move(groups)}});
    }
    return nlohmann::json{{"agent_count", pop.agent_count},
                          {"susceptibility", pop.susceptibility},
                          {"locations", std::move(locations)}};
}

Population population_from_json(const nlohmann::json& j) {
    Population pop;
    pop.agent_count = j.at("agent_count").get<int>();
    pop.susceptibility = j.at("susceptibility").get<std::vector<double>>();
    if (pop.agent_count < 1) throw std::invalid_argument("population: agent_count must be >= 1");
    if (pop.susceptibility.size() != static_cast<std::size_t>(pop.agent_count)) {
        throw std::invalid_argument("population: susceptibility length mismatch");
    }
    for (const auto& loc : j.at("locations")) {
        const LocationType lt = location_type_from_name(loc.at("type").get<std::string>());
        auto& dst = pop.groups[static_cast<int>(lt)];
        for (const auto& g : loc.at("groups")) {
            std::vector<std::uint32_t> members = g.get<std::vector<std::uint32_t>>();
            if (members.empty()) throw std::invalid_argument("population: empty group");
            for (std::uint32_t a : members) {
                if (a >= static_cast<std::uint32_t>(pop.agent_count)) {
                    throw std::invalid_argument("population: agent id out of range");
                }
            }
            dst.push_back(std::move(members));
        }
    }
    return pop;
}

nlohmann::json epi_params_to_json(const EpiParams& params) {
    nlohmann::json betas;
    for (int lt = 0; lt < kLocationTypes; ++lt) {
        betas[location_type_name(static_cast<LocationType>(lt))] =
            params.contact_intensity[static_cast<std::size_t>(lt)];
    }
    return nlohmann::json{{"contact_intensity", std::move(betas)},
                          {"initial_infected_fraction", params.initial_infected_fraction}};
}

EpiParams epi_params_from_json(const nlohmann::json& j) {
    EpiParams params;
    const auto& betas = j.at("contact_intensity");
    for (int lt = 0; lt < kLocationTypes; ++lt) {
        const char* name = location_type_name(static_cast<LocationType>(lt));
        params.contact_intensity[static_cast<std::size_t>(lt)] =
            betas.contains(name) ? betas.at(name).get<double>() : 0.0;
    }
    params.initial_infected_fraction = j.at("initial_infected_fraction").get<double>();
    params.validate();
    return params;
}

}  // namespace diffabm
