#pragma once

#include <Eigen/Core>
#include <string>

#include "diffabm/gvi.hpp"
#include "diffabm/losses.hpp"
#include "diffabm/variational.hpp"

namespace diffabm {

/// Per-parameter-component sample mean, sample standard deviation and
/// sample count of a Monte Carlo gradient.
struct GradientEstimate {
    Eigen::VectorXd mean;
    Eigen::VectorXd stddev;
    int n_samples = 0;
};

enum class EstimatorKind { pathwise, score, hybrid };

std::string estimator_name(EstimatorKind kind);
EstimatorKind estimator_from_name(const std::string& name);

/// Reparameterised (pathwise) estimator of grad_phi E_q[loss] at gradient
/// horizon H: each sample runs the simulator through the tape at horizon H
/// and backpropagates to phi. Sample n draws its base and simulator noise
/// from substreams 2n and 2n+1 of `rng` (common random numbers across all
/// estimators).
GradientEstimate pathwise_gradient(const VariationalFamily& q, const SimulatorLoss& loss,
                                   int horizon, int n_samples, const RngStream& rng,
                                   int threads = 1);

/// Score-function (likelihood-ratio) estimator: mean of
/// loss(y, theta_n) * grad_phi log q(theta_n); needs no simulator gradients.
GradientEstimate score_gradient(const VariationalFamily& q, const SimulatorLoss& loss,
                                int n_samples, const RngStream& rng, int threads = 1);

/// Hybrid forward/reverse estimator: the simulator's 1 x d Jacobian is
/// obtained by forward mode (no simulator tape) and seeds the reverse sweep
/// through the family's sampling tape (a vector-Jacobian product).
GradientEstimate hybrid_gradient(const VariationalFamily& q, const SimulatorLoss& loss,
                                 int n_samples, const RngStream& rng, int threads = 1);

}  // namespace diffabm
