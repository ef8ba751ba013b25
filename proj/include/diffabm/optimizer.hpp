#pragma once

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>

namespace diffabm {

struct AdamWConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;  // decoupled
};

/// AdamW accumulator state: first/second moment estimates, step counter.
struct AdamWState {
    Eigen::VectorXd first_moment;
    Eigen::VectorXd second_moment;
    long step = 0;
    AdamWConfig config;

    explicit AdamWState(int parameter_count, const AdamWConfig& cfg = {})
        : first_moment(Eigen::VectorXd::Zero(parameter_count)),
          second_moment(Eigen::VectorXd::Zero(parameter_count)),
          config(cfg) {}
};

/// One adaptive-moment update with bias correction and decoupled weight
/// decay:
///   m <- b1 m + (1-b1) g;   v <- b2 v + (1-b2) g^2
///   phi <- phi - lr (m_hat / (sqrt(v_hat) + eps) + lambda phi).
/// A non-finite gradient rejects the step: state and parameters are left
/// untouched and false is returned so the caller can report it.
inline bool optimizer_step(AdamWState& state, Eigen::VectorXd& params,
                           const Eigen::VectorXd& gradient) {
    if (params.size() != state.first_moment.size() || gradient.size() != params.size()) {
        throw std::invalid_argument("optimizer_step: shape mismatch");
    }
    if (!gradient.allFinite()) return false;
    const AdamWConfig& c = state.config;
    state.step += 1;
    state.first_moment = c.beta1 * state.first_moment + (1.0 - c.beta1) * gradient;
    state.second_moment =
        c.beta2 * state.second_moment + (1.0 - c.beta2) * gradient.cwiseProduct(gradient);
    const double corr1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double corr2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    const Eigen::VectorXd m_hat = state.first_moment / corr1;
    const Eigen::VectorXd v_hat = state.second_moment / corr2;
    const Eigen::ArrayXd denom = v_hat.array().sqrt() + c.epsilon;
    params -= c.learning_rate *
              ((m_hat.array() / denom).matrix() + c.weight_decay * params);
    return true;
}

}  // namespace diffabm
