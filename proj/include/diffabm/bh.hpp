#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffabm/rng.hpp"
#include "diffabm/scalar_ops.hpp"

namespace diffabm {

/// Gradient horizon sentinel: keep the whole computation graph. The price
/// recursion depends on exactly three lags, so any horizon >= 3 already
/// prunes nothing.
inline constexpr int kFullHorizon = std::numeric_limits<int>::max();

/// Calibratable Brock & Hommes coefficients: two trend-following strategies
/// (g2, g3) and their biases (b2, b3). The fixed companions are
/// g1 = b1 = b4 = 0 and g4 = 1.01.
struct BhParams {
    double g2 = 0.0;
    double g3 = 0.0;
    double b2 = 0.0;
    double b3 = 0.0;
};

/// Auxiliary parameters of the price recursion.
struct BhAux {
    double gross_return = 1.01;      // R
    double choice_intensity = 120.0; // beta
    double noise_scale = 0.04;       // sigma
    int strategies = 4;              // J
    int steps = 100;                 // T

    void validate() const {
        if (!(gross_return > 0.0)) throw std::invalid_argument("BhAux: gross_return must be > 0");
        if (!(noise_scale > 0.0)) throw std::invalid_argument("BhAux: noise_scale must be > 0");
        if (choice_intensity < 0.0) throw std::invalid_argument("BhAux: choice_intensity must be >= 0");
        if (strategies < 2) throw std::invalid_argument("BhAux: strategies must be >= 2");
        if (steps < 1) throw std::invalid_argument("BhAux: steps must be >= 1");
    }
};

/// Fixed trend coefficient of the fourth strategy.
inline constexpr double kBhFixedTrend = 1.01;

/// Strategy vectors (g_j, b_j) from the four free coefficients
/// theta = (g2, g3, b2, b3).
template <class Scalar>
std::pair<std::array<Scalar, 4>, std::array<Scalar, 4>> bh_strategies(
    std::span<const Scalar> theta) {
    if (theta.size() != 4) throw std::invalid_argument("bh_strategies: theta must have 4 entries");
    std::array<Scalar, 4> trend{Scalar(0.0), theta[0], theta[1], Scalar(kBhFixedTrend)};
    std::array<Scalar, 4> bias{Scalar(0.0), theta[2], theta[3], Scalar(0.0)};
    return {trend, bias};
}

/// Deterministic part of the price transition. With lags
/// (x_{t-1}, x_{t-2}, x_{t-3}) returns
///   (1/R) sum_j n_j (g_j x_{t-1} + b_j)
/// where n_j is the softmax over utilities
///   U_j = (x_{t-1} - R x_{t-2}) (g_j x_{t-3} + b_j - R x_{t-2})
/// at scale beta. The stochastic step adds (sigma/R) eps_t.
template <class Scalar>
Scalar bh_transition(std::span<const Scalar> trend, std::span<const Scalar> bias,
                     const Scalar& lag1, const Scalar& lag2, const Scalar& lag3,
                     const BhAux& aux) {
    const double R = aux.gross_return;
    const std::size_t J = trend.size();
    Scalar momentum = lag1 - R * lag2;
    std::vector<Scalar> utility;
    utility.reserve(J);
    for (std::size_t j = 0; j < J; ++j) {
        utility.push_back(momentum * (trend[j] * lag3 + bias[j] - R * lag2));
    }
    std::vector<Scalar> weight = stable_softmax(std::span<const Scalar>(utility),
                                                aux.choice_intensity);
    Scalar mean(0.0);
    for (std::size_t j = 0; j < J; ++j) {
        mean += weight[j] * (trend[j] * lag1 + bias[j]);
    }
    return mean / R;
}

/// Convenience overload taking theta = (g2, g3, b2, b3) directly.
template <class Scalar>
Scalar bh_transition(std::span<const Scalar> theta, const Scalar& lag1, const Scalar& lag2,
                     const Scalar& lag3, const BhAux& aux) {
    auto [trend, bias] = bh_strategies(theta);
    return bh_transition(std::span<const Scalar>(trend), std::span<const Scalar>(bias),
                         lag1, lag2, lag3, aux);
}

/// Simulated price series plus the standard-normal draws that produced it.
template <class Scalar>
struct Trajectory {
    std::vector<Scalar> prices;
    std::vector<double> noise;
};

/// Iterates the price recursion from x_{-2} = x_{-1} = x_0 = 0. Before
/// computing x_t, each lagged price x_{t'} with t' < t - H is passed through
/// detach, so H = 0 detaches all three lags, H = 1 keeps x_{t-1} attached,
/// H = 2 keeps x_{t-1} and x_{t-2}, and H >= 3 keeps the full graph.
/// Price values are identical for every horizon; only gradients differ.
template <class Scalar>
std::vector<Scalar> bh_simulate_with_noise(std::span<const Scalar> theta, const BhAux& aux,
                                           std::span<const double> noise, int horizon) {
    aux.validate();
    if (horizon < 0) throw std::invalid_argument("bh_simulate: horizon must be non-negative");
    if (noise.size() != static_cast<std::size_t>(aux.steps)) {
        throw std::invalid_argument("bh_simulate: noise length must equal aux.steps");
    }
    auto [trend, bias] = bh_strategies(theta);
    const double noise_gain = aux.noise_scale / aux.gross_return;
    Scalar lag1(0.0), lag2(0.0), lag3(0.0);
    std::vector<Scalar> prices;
    prices.reserve(noise.size());
    for (int t = 1; t <= aux.steps; ++t) {
        const Scalar a1 = (horizon >= 1) ? lag1 : detach(lag1);
        const Scalar a2 = (horizon >= 2) ? lag2 : detach(lag2);
        const Scalar a3 = (horizon >= 3) ? lag3 : detach(lag3);
        Scalar x = bh_transition(std::span<const Scalar>(trend), std::span<const Scalar>(bias),
                                 a1, a2, a3, aux) +
                   noise_gain * noise[t - 1];
        if (!std::isfinite(value_of(x))) {
            throw std::runtime_error("bh_simulate: non-finite price at t = " + std::to_string(t));
        }
        lag3 = lag2;
        lag2 = lag1;
        lag1 = x;
        prices.push_back(std::move(x));
    }
    return prices;
}

/// As above, drawing the noise from `rng` (draw t-1 yields eps_t).
template <class Scalar>
Trajectory<Scalar> bh_simulate(std::span<const Scalar> theta, const BhAux& aux, RngStream rng,
                               int horizon) {
    Trajectory<Scalar> out;
    out.noise.resize(static_cast<std::size_t>(aux.steps));
    for (int t = 0; t < aux.steps; ++t) out.noise[t] = rng.normal_at(static_cast<std::uint64_t>(t));
    out.prices = bh_simulate_with_noise(theta, aux, std::span<const double>(out.noise), horizon);
    return out;
}

inline std::vector<double> bh_ground_truth_prices(const BhParams& p, const BhAux& aux,
                                                  RngStream rng) {
    const std::array<double, 4> theta{p.g2, p.g3, p.b2, p.b3};
    return bh_simulate<double>(std::span<const double>(theta), aux, rng, kFullHorizon).prices;
}

}  // namespace diffabm
