#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "diffabm/rng.hpp"

namespace diffabm {

/// Location types with a contact-intensity parameter. The first ten are the
/// named calibration targets; `reserve` is an unused spare slot.
enum class LocationType : int {
    household = 0,
    care_home,
    school,
    company,
    university,
    pub,
    shop,
    gym,
    cinema,
    visit,
    reserve,
};

inline constexpr int kLocationTypes = 11;
inline constexpr int kCalibratedLocationTypes = 10;  // reserve is not calibrated

const char* location_type_name(LocationType t);
LocationType location_type_from_name(const std::string& name);

/// Per-location-type group synthesis settings (ignored for households,
/// which follow the truncated-geometric size law below).
struct GroupSynthesis {
    double participation = 0.0;  // probability an agent joins one group
    double mean_size = 1.0;
};

struct PopulationConfig {
    int agents = 10000;
    double household_mean_size = 2.4;
    int household_max_size = 12;
    double susceptibility = 1.0;
    std::array<GroupSynthesis, kLocationTypes> groups = default_group_synthesis();

    static std::array<GroupSynthesis, kLocationTypes> default_group_synthesis();
    void validate() const;
};

/// A static partition of agents into interaction groups, one list of groups
/// per location type. Every agent belongs to exactly one household; other
/// memberships are independent with the configured participation.
struct Population {
    int agent_count = 0;
    std::vector<double> susceptibility;  // psi_s per agent
    std::array<std::vector<std::vector<std::uint32_t>>, kLocationTypes> groups;

    std::size_t group_count() const;
    std::size_t membership_count() const;
};

/// Deterministically builds a synthetic population from `rng`. Household
/// sizes are drawn from a geometric distribution truncated at
/// `household_max_size` with the configured mean; each agent then joins at
/// most one group per other location type.
Population synth_population(const PopulationConfig& config, RngStream rng);

}  // namespace diffabm
