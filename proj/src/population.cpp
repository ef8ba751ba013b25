#include "diffabm/population.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace diffabm {

namespace {

constexpr const char* kLocationNames[kLocationTypes] = {
    "household", "care_home", "school", "company", "university",
    "pub",       "shop",      "gym",    "cinema",  "visit",
    "reserve",
};

// Substream tags used inside synth_population.
enum : std::uint64_t {
    kTagHouseholds = 0,
    kTagParticipation = 1000,
    kTagShuffle = 2000,
    kTagSizes = 3000,
};

}  // namespace

const char* location_type_name(LocationType t) {
    return kLocationNames[static_cast<int>(t)];
}

LocationType location_type_from_name(const std::string& name) {
    for (int i = 0; i < kLocationTypes; ++i) {
        if (name == kLocationNames[i]) return static_cast<LocationType>(i);
    }
    throw std::invalid_argument("unknown location type: " + name);
}

std::array<GroupSynthesis, kLocationTypes> PopulationConfig::default_group_synthesis() {
    // Desk-scale contact structure, tuned so the ground-truth parameters give
    // an epidemic that grows over ~35 days and does not saturate by day 50.
    std::array<GroupSynthesis, kLocationTypes> g{};
    g[static_cast<int>(LocationType::household)] = {1.0, 2.4};  // informational only
    g[static_cast<int>(LocationType::care_home)] = {0.002, 5.0};
    g[static_cast<int>(LocationType::school)] = {0.025, 20.0};
    g[static_cast<int>(LocationType::company)] = {0.05, 4.0};
    g[static_cast<int>(LocationType::university)] = {0.006, 12.0};
    g[static_cast<int>(LocationType::pub)] = {0.035, 3.0};
    g[static_cast<int>(LocationType::shop)] = {0.05, 3.0};
    g[static_cast<int>(LocationType::gym)] = {0.012, 4.0};
    g[static_cast<int>(LocationType::cinema)] = {0.006, 5.0};
    g[static_cast<int>(LocationType::visit)] = {0.025, 2.0};
    g[static_cast<int>(LocationType::reserve)] = {0.0, 1.0};
    return g;
}

void PopulationConfig::validate() const {
    if (agents < 1) throw std::invalid_argument("PopulationConfig: agents must be >= 1");
    if (!(household_mean_size >= 1.0)) {
        throw std::invalid_argument("PopulationConfig: household_mean_size must be >= 1");
    }
    if (household_max_size < 1) {
        throw std::invalid_argument("PopulationConfig: household_max_size must be >= 1");
    }
    if (!(susceptibility >= 0.0)) {
        throw std::invalid_argument("PopulationConfig: susceptibility must be >= 0");
    }
    for (int i = 0; i < kLocationTypes; ++i) {
        const auto& g = groups[i];
        if (g.participation < 0.0 || g.participation > 1.0) {
            throw std::invalid_argument(std::string("PopulationConfig: participation for ") +
                                        kLocationNames[i] + " must be in [0,1]");
        }
        if (!(g.mean_size >= 1.0)) {
            throw std::invalid_argument(std::string("PopulationConfig: mean group size for ") +
                                        kLocationNames[i] + " must be >= 1");
        }
    }
}

std::size_t Population::group_count() const {
    std::size_t n = 0;
    for (const auto& per_type : groups) n += per_type.size();
    return n;
}

std::size_t Population::membership_count() const {
    std::size_t n = 0;
    for (const auto& per_type : groups) {
        for (const auto& g : per_type) n += g.size();
    }
    return n;
}

Population synth_population(const PopulationConfig& config, RngStream rng) {
    config.validate();
    Population pop;
    pop.agent_count = config.agents;
    pop.susceptibility.assign(static_cast<std::size_t>(config.agents), config.susceptibility);

    // Households: geometric sizes truncated at household_max_size. Untruncated
    // mean is the configured one; truncation trims a negligible tail at the
    // defaults (P(size > 12) < 0.2%).
    {
        RngStream hh = rng.substream(kTagHouseholds);
        const double p = 1.0 / config.household_mean_size;
        auto& households = pop.groups[static_cast<int>(LocationType::household)];
        std::uint32_t next = 0;
        std::uint64_t draw = 0;
        while (next < static_cast<std::uint32_t>(config.agents)) {
            int size = 1;
            if (p < 1.0) {
                const double u = hh.uniform_at(draw++);
                size = 1 + static_cast<int>(std::floor(std::log1p(-u) / std::log1p(-p)));
                size = std::clamp(size, 1, config.household_max_size);
            }
            std::vector<std::uint32_t> members;
            for (int k = 0; k < size && next < static_cast<std::uint32_t>(config.agents); ++k) {
                members.push_back(next++);
            }
            households.push_back(std::move(members));
        }
    }

    for (int lt = 0; lt < kLocationTypes; ++lt) {
        if (lt == static_cast<int>(LocationType::household)) continue;
        const GroupSynthesis& synth = config.groups[lt];
        if (synth.participation <= 0.0) continue;

        RngStream part = rng.substream(kTagParticipation + static_cast<std::uint64_t>(lt));
        std::vector<std::uint32_t> members;
        for (std::uint32_t a = 0; a < static_cast<std::uint32_t>(config.agents); ++a) {
            if (part.uniform_at(a) < synth.participation) members.push_back(a);
        }
        if (members.empty()) continue;

        // Shuffle so household co-members do not systematically share the
        // same school/company/etc.
        RngStream shuf = rng.substream(kTagShuffle + static_cast<std::uint64_t>(lt));
        for (std::size_t i = members.size() - 1; i > 0; --i) {
            const std::size_t j = static_cast<std::size_t>(shuf.uniform_at(i) * double(i + 1));
            std::swap(members[i], members[std::min(j, i)]);
        }

        // Chunk into groups with sizes uniform in [ceil(mean/2), floor(1.5 mean)].
        RngStream sizes = rng.substream(kTagSizes + static_cast<std::uint64_t>(lt));
        const int lo = std::max(1, static_cast<int>(std::ceil(0.5 * synth.mean_size)));
        const int hi = std::max(lo, static_cast<int>(std::floor(1.5 * synth.mean_size)));
        auto& out = pop.groups[lt];
        std::size_t cursor = 0;
        std::uint64_t draw = 0;
        while (cursor < members.size()) {
            const int span = hi > lo ? lo + static_cast<int>(sizes.uniform_at(draw++) *
                                                             double(hi - lo + 1))
                                     : lo;
            const std::size_t take =
                std::min(members.size() - cursor, static_cast<std::size_t>(std::min(span, hi)));
            out.emplace_back(members.begin() + static_cast<std::ptrdiff_t>(cursor),
                             members.begin() + static_cast<std::ptrdiff_t>(cursor + take));
            cursor += take;
        }
    }
    return pop;
}

}  // namespace diffabm
