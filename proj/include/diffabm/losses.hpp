#pragma once

#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "diffabm/bh.hpp"
#include "diffabm/dual.hpp"
#include "diffabm/epi.hpp"
#include "diffabm/objective.hpp"
#include "diffabm/tape.hpp"

namespace diffabm {

/// A simulator-backed loss theta -> l(y, theta), evaluable in all three
/// scalar modes: traced (reverse), dual (forward, no tape) and plain.
/// The horizon argument truncates backpropagation through time in traced
/// mode; values are horizon-independent, and the dual/plain modes always
/// evaluate the full-graph values.
class SimulatorLoss {
  public:
    virtual ~SimulatorLoss() = default;
    virtual int theta_dim() const = 0;
    virtual TracedValue eval_traced(Tape& tape, std::span<const TracedValue> theta, int horizon,
                                    RngStream sim_noise) const = 0;
    virtual Dual eval_dual(std::span<const Dual> theta, RngStream sim_noise) const = 0;
    virtual double eval_plain(std::span<const double> theta, RngStream sim_noise) const = 0;
};

/// MMD^2 between a Brock & Hommes price series simulated at theta and an
/// observed series, with a Gaussian kernel whose bandwidth defaults to the
/// median heuristic of the observed data (frozen at construction).
class BhMmdLoss final : public SimulatorLoss {
  public:
    BhMmdLoss(std::vector<double> observed, const BhAux& aux,
              std::optional<double> bandwidth = std::nullopt)
        : aux_(aux),
          observed_(std::move(observed)),
          kernel_(bandwidth ? *bandwidth : median_heuristic(observed_)),
          yy_term_(mmd2_within_term(observed_, kernel_)) {
        aux_.validate();
    }

    int theta_dim() const override { return 4; }
    const GaussianKernel& kernel() const { return kernel_; }
    const std::vector<double>& observed() const { return observed_; }
    const BhAux& aux() const { return aux_; }

    TracedValue eval_traced(Tape&, std::span<const TracedValue> theta, int horizon,
                            RngStream sim_noise) const override {
        return eval_impl<TracedValue>(theta, horizon, sim_noise);
    }
    Dual eval_dual(std::span<const Dual> theta, RngStream sim_noise) const override {
        return eval_impl<Dual>(theta, kFullHorizon, sim_noise);
    }
    double eval_plain(std::span<const double> theta, RngStream sim_noise) const override {
        return eval_impl<double>(theta, kFullHorizon, sim_noise);
    }

  private:
    template <class S>
    S eval_impl(std::span<const S> theta, int horizon, const RngStream& sim_noise) const {
        std::vector<double> noise(static_cast<std::size_t>(aux_.steps));
        for (int t = 0; t < aux_.steps; ++t) {
            noise[static_cast<std::size_t>(t)] = sim_noise.normal_at(static_cast<std::uint64_t>(t));
        }
        std::vector<S> prices =
            bh_simulate_with_noise(theta, aux_, std::span<const double>(noise), horizon);
        return mmd2(std::span<const S>(prices), std::span<const double>(observed_), kernel_,
                    yy_term_);
    }

    BhAux aux_;
    std::vector<double> observed_;
    GaussianKernel kernel_;
    double yy_term_;
};

/// Unconstrained-to-constrained map for the epidemic calibration: the ten
/// named contact intensities go through softplus, the initial infected
/// fraction through a sigmoid onto the log-spaced range (1e-5, 1e-2).
inline constexpr double kEpiI0LogLow = -11.512925464970229;   // ln 1e-5
inline constexpr double kEpiI0LogHigh = -4.605170185988091;   // ln 1e-2
inline constexpr int kEpiThetaDim = kCalibratedLocationTypes + 1;

template <class S>
EpiParamsT<S> epi_constrain(std::span<const S> theta) {
    if (theta.size() != static_cast<std::size_t>(kEpiThetaDim)) {
        throw std::invalid_argument("epi_constrain: expected 11 unconstrained parameters");
    }
    EpiParamsT<S> params;
    for (int i = 0; i < kCalibratedLocationTypes; ++i) {
        params.contact_intensity[static_cast<std::size_t>(i)] =
            softplus(theta[static_cast<std::size_t>(i)]);
    }
    params.contact_intensity[static_cast<int>(LocationType::reserve)] = S(0.0);
    params.initial_infected_fraction =
        exp(kEpiI0LogLow +
            (kEpiI0LogHigh - kEpiI0LogLow) * sigmoid(theta[kCalibratedLocationTypes]));
    return params;
}

/// Inverse of epi_constrain for constrained values inside the ranges.
inline Eigen::VectorXd epi_unconstrain(const EpiParams& params) {
    Eigen::VectorXd theta(kEpiThetaDim);
    for (int i = 0; i < kCalibratedLocationTypes; ++i) {
        const double y = params.contact_intensity[static_cast<std::size_t>(i)];
        theta[i] = std::log(std::expm1(y));  // softplus inverse
    }
    const double s = (std::log(params.initial_infected_fraction) - kEpiI0LogLow) /
                     (kEpiI0LogHigh - kEpiI0LogLow);
    theta[kCalibratedLocationTypes] = std::log(s) - std::log1p(-s);  // logit
    return theta;
}

/// Squared log10 distance between simulated and observed daily-infection
/// series for the Gumbel-Softmax epidemic model.
class EpiCalibrationLoss final : public SimulatorLoss {
  public:
    EpiCalibrationLoss(std::shared_ptr<const Population> population, const EpiConfig& config,
                       std::vector<double> observed_daily)
        : population_(std::move(population)),
          config_(config),
          observed_(std::move(observed_daily)) {
        config_.validate();
        if (observed_.size() != static_cast<std::size_t>(config_.days)) {
            throw std::invalid_argument("EpiCalibrationLoss: observed series length mismatch");
        }
    }

    int theta_dim() const override { return kEpiThetaDim; }
    const EpiConfig& config() const { return config_; }
    const Population& population() const { return *population_; }
    const std::vector<double>& observed() const { return observed_; }

    TracedValue eval_traced(Tape&, std::span<const TracedValue> theta, int /*horizon*/,
                            RngStream sim_noise) const override {
        return eval_impl<TracedValue>(theta, sim_noise);
    }
    Dual eval_dual(std::span<const Dual> theta, RngStream sim_noise) const override {
        return eval_impl<Dual>(theta, sim_noise);
    }
    double eval_plain(std::span<const double> theta, RngStream sim_noise) const override {
        return eval_impl<double>(theta, sim_noise);
    }

  private:
    template <class S>
    S eval_impl(std::span<const S> theta, const RngStream& sim_noise) const {
        EpiParamsT<S> params = epi_constrain(theta);
        EpiResult<S> result = epi_simulate(params, *population_, config_, sim_noise);
        return log10_sse(std::span<const S>(result.daily_new),
                         std::span<const double>(observed_));
    }

    std::shared_ptr<const Population> population_;
    EpiConfig config_;
    std::vector<double> observed_;
};

}  // namespace diffabm
