#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "diffabm/estimators.hpp"
#include "diffabm/gvi.hpp"
#include "diffabm/losses.hpp"
#include "diffabm/optimizer.hpp"
#include "diffabm/variational.hpp"

namespace diffabm {

struct TrainConfig {
    int epochs = 2000;
    GviConfig gvi;
    EstimatorKind estimator = EstimatorKind::pathwise;
    int horizon = kFullHorizon;  // pathwise only
    AdamWConfig adamw;
    int threads = 1;

    void validate() const {
        if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
        if (horizon < 0) throw std::invalid_argument("TrainConfig: horizon must be >= 0");
        if (threads < 1) throw std::invalid_argument("TrainConfig: threads must be >= 1");
        gvi.validate();
    }
};

struct EpochRecord {
    int epoch = 0;
    double objective = 0.0;  // loss_term + w * kl_term
    double loss_term = 0.0;  // mean simulator loss over the MC samples
    double kl_term = 0.0;    // KL estimate (closed form when available)
    double wall_ms = 0.0;
    bool step_rejected = false;
};

/// Raised when the objective turns non-finite; carries the epoch index.
class TrainAbort : public std::runtime_error {
  public:
    TrainAbort(int epoch, const std::string& what)
        : std::runtime_error("training aborted at epoch " + std::to_string(epoch) + ": " + what),
          epoch_(epoch) {}
    int epoch() const noexcept { return epoch_; }

  private:
    int epoch_;
};

/// Minimises loss_term + w * KL(q || N(0,I)) over the family's parameters
/// with AdamW, estimating the loss-term gradient with the chosen estimator.
/// The KL gradient always flows by reverse mode (closed form for the
/// diagonal Gaussian, reparameterised Monte Carlo for the flow, sharing the
/// loss samples). Deterministic given `rng`; epoch e draws from
/// rng.substream(e). Mutates `q` in place and returns the per-epoch log.
std::vector<EpochRecord> train(VariationalFamily& q, const SimulatorLoss& loss,
                               const TrainConfig& config, const RngStream& rng);

/// Trailing mean of the last `window` values at each position ("10-step
/// moving average" with window = 10).
std::vector<double> moving_average(const std::vector<double>& values, int window);

}  // namespace diffabm
