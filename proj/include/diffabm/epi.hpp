#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffabm/population.hpp"
#include "diffabm/scalar_ops.hpp"

namespace diffabm {

/// Contact intensities beta_L per location type plus the initially infected
/// fraction of agents. The `reserve` slot exists but is unused by default.
template <class Scalar>
struct EpiParamsT {
    std::array<Scalar, kLocationTypes> contact_intensity{};
    Scalar initial_infected_fraction{0.0};

    void validate() const {
        for (int i = 0; i < kLocationTypes; ++i) {
            if (!(value_of(contact_intensity[i]) >= 0.0)) {
                throw std::invalid_argument(std::string("EpiParams: contact intensity for ") +
                                            location_type_name(static_cast<LocationType>(i)) +
                                            " must be >= 0");
            }
        }
        const double f = value_of(initial_infected_fraction);
        if (!(f > 0.0 && f < 1.0)) {
            throw std::invalid_argument("EpiParams: initial infected fraction must be in (0,1)");
        }
    }
};

using EpiParams = EpiParamsT<double>;

/// Ground-truth parameter values used to generate synthetic data:
/// I0 = 10^-3.5 N_a, beta 0.6 for household/care home, 0.4 for
/// school/company/university, 0.1 elsewhere.
inline EpiParams epi_ground_truth_params() {
    EpiParams p;
    p.contact_intensity[static_cast<int>(LocationType::household)] = 0.6;
    p.contact_intensity[static_cast<int>(LocationType::care_home)] = 0.6;
    p.contact_intensity[static_cast<int>(LocationType::school)] = 0.4;
    p.contact_intensity[static_cast<int>(LocationType::company)] = 0.4;
    p.contact_intensity[static_cast<int>(LocationType::university)] = 0.4;
    p.contact_intensity[static_cast<int>(LocationType::pub)] = 0.1;
    p.contact_intensity[static_cast<int>(LocationType::shop)] = 0.1;
    p.contact_intensity[static_cast<int>(LocationType::gym)] = 0.1;
    p.contact_intensity[static_cast<int>(LocationType::cinema)] = 0.1;
    p.contact_intensity[static_cast<int>(LocationType::visit)] = 0.1;
    p.contact_intensity[static_cast<int>(LocationType::reserve)] = 0.0;
    p.initial_infected_fraction = std::pow(10.0, -3.5);
    return p;
}

enum class GsMode { soft, straight_through };

struct EpiConfig {
    int days = 50;
    double gs_temperature = 0.1;
    int infectious_days = 5;         // constant infectiousness profile 1.0
    double interaction_time = 1.0;   // Delta t per location visit
    GsMode mode = GsMode::soft;

    void validate() const {
        if (days < 1) throw std::invalid_argument("EpiConfig: days must be >= 1");
        if (!(gs_temperature > 0.0)) {
            throw std::invalid_argument("EpiConfig: gs_temperature must be > 0");
        }
        if (infectious_days < 1) {
            throw std::invalid_argument("EpiConfig: infectious_days must be >= 1");
        }
        if (!(interaction_time > 0.0)) {
            throw std::invalid_argument("EpiConfig: interaction_time must be > 0");
        }
    }
};

/// p = 1 - exp(-psi * beta * dt * load); the probability a susceptible agent
/// is infected given the aggregate infectious load of its group.
template <class Beta, class Load>
auto infection_probability(const Beta& beta, const Load& load, double dt, double psi) {
    if (value_of(beta) < 0.0 || value_of(load) < 0.0 || dt < 0.0 || psi < 0.0) {
        throw std::domain_error("infection_probability: negative input");
    }
    return 1.0 - exp(-(psi * dt) * (beta * load));
}

template <class Scalar>
struct EpiResult {
    std::vector<Scalar> daily_new;   // days 1..T
    std::vector<Scalar> cumulative;  // days 0..T; entry 0 is the seeded mass
    std::vector<Scalar> final_mass;  // per-agent infection mass after day T
    Scalar seeded_mass{0.0};
};

namespace detail {

enum : std::uint64_t { kTagSeedNoise = 101, kTagInfectionNoise = 102 };

// Exposures with probability below this add nothing; the threshold also
// absorbs floating-point dust in the incrementally updated loads.
inline constexpr double kMinInfectionProbability = 1e-15;

}  // namespace detail

/// Runs the Gumbel-Softmax epidemic for `config.days` days. Day 0 seeds each
/// agent's infection mass with a two-category draw at the initial infected
/// fraction; on each later day every location group accumulates the
/// infectious load of its members (mass added during the previous
/// `infectious_days` days, constant profile 1.0) and every member receives a
/// relaxed Bernoulli draw at the group's infection probability, clipped to
/// the agent's remaining susceptible mass. The daily new-infection series is
/// differentiable w.r.t. the parameters with the noise held fixed, and the
/// noise is keyed by (day, location, group, member) so it does not shift
/// when parameters change.
template <class Scalar>
EpiResult<Scalar> epi_simulate(const EpiParamsT<Scalar>& params, const Population& pop,
                               const EpiConfig& config, RngStream rng) {
    params.validate();
    config.validate();
    if (pop.agent_count < 1) throw std::invalid_argument("epi_simulate: empty population");
    const std::size_t n_agents = static_cast<std::size_t>(pop.agent_count);

    EpiResult<Scalar> result;
    result.daily_new.reserve(static_cast<std::size_t>(config.days));
    result.cumulative.reserve(static_cast<std::size_t>(config.days) + 1);

    std::vector<Scalar> mass(n_agents, Scalar(0.0));       // m_i in [0,1]
    std::vector<Scalar> load(n_agents, Scalar(0.0));       // infectious load I_i(t)
    std::vector<std::vector<Scalar>> added;                 // mass added per day
    added.reserve(static_cast<std::size_t>(config.days) + 1);

    // Day 0: seeding.
    {
        RngStream seed_noise = rng.substream(detail::kTagSeedNoise);
        Scalar logit_infected = log(params.initial_infected_fraction);
        Scalar logit_susceptible = log(1.0 - params.initial_infected_fraction);
        std::vector<Scalar> seeded(n_agents, Scalar(0.0));
        Scalar total(0.0);
        for (std::size_t a = 0; a < n_agents; ++a) {
            Scalar draw = gumbel_softmax_binary(logit_infected, logit_susceptible,
                                                config.gs_temperature,
                                                seed_noise.gumbel_at(2 * a),
                                                seed_noise.gumbel_at(2 * a + 1));
            if (config.mode == GsMode::straight_through) draw = straight_through(draw);
            mass[a] = draw;
            total += draw;
            seeded[a] = std::move(draw);
        }
        added.push_back(std::move(seeded));
        result.seeded_mass = total;
        result.cumulative.push_back(total);
    }

    RngStream infection_noise = rng.substream(detail::kTagInfectionNoise);
    for (int day = 1; day <= config.days; ++day) {
        // Mass added on day s is infectious on days s+1 .. s+infectious_days.
        for (std::size_t a = 0; a < n_agents; ++a) {
            const Scalar& fresh = added[static_cast<std::size_t>(day - 1)][a];
            if (!is_zero_constant(fresh)) load[a] += fresh;
            const int expired = day - 1 - config.infectious_days;
            if (expired >= 0) {
                const Scalar& old = added[static_cast<std::size_t>(expired)][a];
                if (!is_zero_constant(old)) load[a] -= old;
            }
        }

        std::vector<Scalar> today(n_agents, Scalar(0.0));
        Scalar new_today(0.0);
        RngStream day_stream = infection_noise.substream(static_cast<std::uint64_t>(day));
        for (int lt = 0; lt < kLocationTypes; ++lt) {
            const Scalar& beta = params.contact_intensity[lt];
            if (is_zero_constant(beta)) continue;  // no value and no gradient path
            RngStream type_stream = day_stream.substream(static_cast<std::uint64_t>(lt));
            const auto& groups = pop.groups[lt];
            const double dt = config.interaction_time;
            for (std::size_t g = 0; g < groups.size(); ++g) {
                const auto& members = groups[g];
                Scalar group_load(0.0);
                for (std::uint32_t a : members) {
                    if (!is_zero_constant(load[a])) group_load += load[a];
                }
                if (value_of(group_load) <= 0.0) continue;

                RngStream group_stream = type_stream.substream(g);
                for (std::size_t slot = 0; slot < members.size(); ++slot) {
                    const std::uint32_t a = members[slot];
                    if (value_of(mass[a]) >= 1.0) continue;  // no susceptible mass left
                    const double psi = pop.susceptibility[a];
                    if (psi == 0.0) continue;
                    Scalar exponent = (psi * dt) * (beta * group_load);
                    Scalar neg_exponent = -exponent;
                    Scalar p = 1.0 - exp(neg_exponent);
                    if (value_of(p) < detail::kMinInfectionProbability) continue;
                    // log(1 - p) is exactly -exponent; reuse it as the
                    // second logit of the relaxed Bernoulli.
                    Scalar draw = gumbel_softmax_binary(log(p), neg_exponent,
                                                        config.gs_temperature,
                                                        group_stream.gumbel_at(2 * slot),
                                                        group_stream.gumbel_at(2 * slot + 1));
                    if (config.mode == GsMode::straight_through) {
                        draw = straight_through(draw);
                    }
                    Scalar susceptible = 1.0 - mass[a];
                    Scalar gain = min_by_value(susceptible, draw);
                    mass[a] += gain;
                    if (is_zero_constant(today[a])) {
                        today[a] = gain;
                    } else {
                        today[a] += gain;
                    }
                    new_today += gain;
                }
            }
        }
        if (!std::isfinite(value_of(new_today))) {
            throw std::runtime_error("epi_simulate: non-finite infections on day " +
                                     std::to_string(day));
        }
        result.cumulative.push_back(result.cumulative.back() + new_today);
        result.daily_new.push_back(std::move(new_today));
        added.push_back(std::move(today));
    }
    result.final_mass = std::move(mass);
    return result;
}

}  // namespace diffabm
