#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>

#include "diffabm/losses.hpp"
#include "diffabm/scalar_ops.hpp"
#include "diffabm/variational.hpp"

namespace diffabm {

/// Standard normal prior over R^d (independent N(0,1) per component).
struct StandardNormalPrior {
    int dim = 1;

    double log_prob(std::span<const double> theta) const {
        check_dim(theta.size());
        double sq = 0.0;
        for (double t : theta) sq += t * t;
        return -0.5 * sq - 0.5 * dim * 1.8378770664093453;
    }

    /// log pi(theta) with gradient flowing through a traced theta.
    TracedValue log_prob_traced(std::span<const TracedValue> theta) const {
        check_dim(theta.size());
        TracedValue sq(0.0);
        for (const TracedValue& t : theta) sq += t * t;
        return -0.5 * sq - 0.5 * dim * 1.8378770664093453;
    }

  private:
    void check_dim(std::size_t n) const {
        if (n != static_cast<std::size_t>(dim)) {
            throw std::invalid_argument("StandardNormalPrior: dimension mismatch");
        }
    }
};

/// Generalised-posterior settings: regularisation weight w and the number of
/// Monte Carlo samples per objective evaluation.
struct GviConfig {
    double w = 1e-3;
    int n_samples = 5;

    void validate() const {
        if (!(w >= 0.0)) throw std::invalid_argument("GviConfig: w must be >= 0");
        if (n_samples < 1) throw std::invalid_argument("GviConfig: n_samples must be >= 1");
    }
};

namespace detail {

inline RngStream theta_noise_stream(const RngStream& rng, int sample) {
    return rng.substream(2 * static_cast<std::uint64_t>(sample));
}

inline RngStream sim_noise_stream(const RngStream& rng, int sample) {
    return rng.substream(2 * static_cast<std::uint64_t>(sample) + 1);
}

}  // namespace detail

/// Monte Carlo GVI objective on one tape:
///   (1/N) sum_n loss(y, theta_n)  +  w * (1/N) sum_n [log q(theta_n) - log pi(theta_n)],
/// with theta_n reparameterised samples from q. The second sum estimates
/// KL(q || pi); the whole expression is differentiable w.r.t. the family's
/// parameter leaves. Raises if the prior has no mass at a sampled theta.
inline TracedValue gvi_objective(Tape& tape, const VariationalFamily& q,
                                 const StandardNormalPrior& prior, const SimulatorLoss& loss,
                                 const GviConfig& config, const RngStream& rng,
                                 int horizon = kFullHorizon) {
    config.validate();
    auto inst = q.instantiate(tape);
    TracedValue loss_acc(0.0);
    TracedValue kl_acc(0.0);
    for (int n = 0; n < config.n_samples; ++n) {
        auto sample = q.sample_traced(tape, inst, detail::theta_noise_stream(rng, n));
        TracedValue log_prior = prior.log_prob_traced(sample.theta);
        if (!std::isfinite(log_prior.value)) {
            std::ostringstream oss;
            oss << "gvi_objective: prior has no support at sampled theta (";
            for (std::size_t i = 0; i < sample.theta.size(); ++i) {
                oss << (i ? ", " : "") << sample.theta[i].value;
            }
            oss << ")";
            throw std::domain_error(oss.str());
        }
        loss_acc += loss.eval_traced(tape, sample.theta, horizon,
                                     detail::sim_noise_stream(rng, n));
        kl_acc += sample.log_density - log_prior;
    }
    const double inv_n = 1.0 / static_cast<double>(config.n_samples);
    return loss_acc * inv_n + config.w * (kl_acc * inv_n);
}

}  // namespace diffabm
