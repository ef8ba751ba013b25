#include "diffabm/estimators.hpp"

#include <functional>
#include <stdexcept>
#include <thread>
#include <vector>

namespace diffabm {

std::string estimator_name(EstimatorKind kind) {
    switch (kind) {
        case EstimatorKind::pathwise: return "pathwise";
        case EstimatorKind::score: return "score";
        case EstimatorKind::hybrid: return "hybrid";
    }
    throw std::logic_error("estimator_name: unknown kind");
}

EstimatorKind estimator_from_name(const std::string& name) {
    if (name == "pathwise") return EstimatorKind::pathwise;
    if (name == "score") return EstimatorKind::score;
    if (name == "hybrid") return EstimatorKind::hybrid;
    throw std::invalid_argument("unknown estimator: " + name);
}

namespace {

// Runs n independent per-sample jobs (optionally on several threads) and
// reduces mean/std in sample-index order, so the result is independent of
// the degree of parallelism.
GradientEstimate reduce_samples(int n_samples, int params, int threads,
                                const std::function<Eigen::VectorXd(int)>& job) {
    if (n_samples < 1) throw std::invalid_argument("gradient estimate: n_samples must be >= 1");
    Eigen::MatrixXd rows(n_samples, params);
    if (threads <= 1 || n_samples == 1) {
        for (int n = 0; n < n_samples; ++n) rows.row(n) = job(n).transpose();
    } else {
        const int workers = std::min(threads, n_samples);
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&, w]() {
                try {
                    for (int n = w; n < n_samples; n += workers) {
                        rows.row(n) = job(n).transpose();
                    }
                } catch (...) {
                    errors[static_cast<std::size_t>(w)] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }
    GradientEstimate est;
    est.n_samples = n_samples;
    est.mean = rows.colwise().mean();
    if (n_samples > 1) {
        Eigen::MatrixXd centered = rows.rowwise() - est.mean.transpose();
        est.stddev =
            (centered.array().square().colwise().sum() / double(n_samples - 1)).sqrt().matrix();
    } else {
        est.stddev = Eigen::VectorXd::Zero(params);
    }
    return est;
}

Eigen::VectorXd gradient_from_adjoints(const std::vector<double>& adjoints,
                                       const VariationalFamily::Instantiated& inst) {
    Eigen::VectorXd g(static_cast<Eigen::Index>(inst.params.size()));
    for (std::size_t i = 0; i < inst.params.size(); ++i) {
        g[static_cast<Eigen::Index>(i)] = gradient_wrt(adjoints, inst.params[i]);
    }
    return g;
}

// Scalar-loss Jacobian w.r.t. theta by forward mode, chunked when theta has
// more components than a dual batch carries.
Eigen::VectorXd loss_jacobian_fmad(const SimulatorLoss& loss, std::span<const double> theta,
                                   const RngStream& sim_noise, double* loss_value) {
    const std::size_t d = theta.size();
    Eigen::VectorXd jac(static_cast<Eigen::Index>(d));
    std::vector<Dual> args(d);
    for (std::size_t start = 0; start < d; start += Dual::max_directions) {
        const auto k = static_cast<std::uint32_t>(
            std::min<std::size_t>(Dual::max_directions, d - start));
        for (std::size_t i = 0; i < d; ++i) {
            args[i] = (i >= start && i < start + k)
                          ? Dual::seeded(theta[i], k, static_cast<std::uint32_t>(i - start))
                          : Dual(theta[i]);
        }
        const Dual out = loss.eval_dual(std::span<const Dual>(args), sim_noise);
        for (std::uint32_t j = 0; j < k; ++j) {
            jac[static_cast<Eigen::Index>(start + j)] = out.tangent(j);
        }
        if (loss_value) *loss_value = out.value();
    }
    return jac;
}

}  // namespace

GradientEstimate pathwise_gradient(const VariationalFamily& q, const SimulatorLoss& loss,
                                   int horizon, int n_samples, const RngStream& rng,
                                   int threads) {
    auto job = [&](int n) -> Eigen::VectorXd {
        Tape tape;
        auto inst = q.instantiate(tape);
        auto sample = q.sample_traced(tape, inst, detail::theta_noise_stream(rng, n));
        TracedValue value = loss.eval_traced(tape, sample.theta, horizon,
                                             detail::sim_noise_stream(rng, n));
        if (!value.attached()) {
            return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(inst.params.size()));
        }
        return gradient_from_adjoints(tape.backward(value.node), inst);
    };
    return reduce_samples(n_samples, q.param_count(), threads, job);
}

GradientEstimate score_gradient(const VariationalFamily& q, const SimulatorLoss& loss,
                                int n_samples, const RngStream& rng, int threads) {
    auto job = [&](int n) -> Eigen::VectorXd {
        const Eigen::VectorXd theta = q.sample_values(detail::theta_noise_stream(rng, n));
        const double loss_value =
            loss.eval_plain(std::span<const double>(theta.data(),
                                                    static_cast<std::size_t>(theta.size())),
                            detail::sim_noise_stream(rng, n));
        Tape tape;
        auto inst = q.instantiate(tape);
        TracedValue log_q = q.log_prob_traced(
            tape, inst,
            std::span<const double>(theta.data(), static_cast<std::size_t>(theta.size())));
        return loss_value * gradient_from_adjoints(tape.backward(log_q.node), inst);
    };
    return reduce_samples(n_samples, q.param_count(), threads, job);
}

GradientEstimate hybrid_gradient(const VariationalFamily& q, const SimulatorLoss& loss,
                                 int n_samples, const RngStream& rng, int threads) {
    auto job = [&](int n) -> Eigen::VectorXd {
        Tape tape;
        auto inst = q.instantiate(tape);
        auto sample = q.sample_traced(tape, inst, detail::theta_noise_stream(rng, n));
        std::vector<double> theta(sample.theta.size());
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = sample.theta[i].value;
        const Eigen::VectorXd jac =
            loss_jacobian_fmad(loss, theta, detail::sim_noise_stream(rng, n), nullptr);
        std::vector<std::pair<Tape::NodeId, double>> seeds;
        seeds.reserve(theta.size());
        for (std::size_t i = 0; i < theta.size(); ++i) {
            if (sample.theta[i].attached()) {
                seeds.emplace_back(sample.theta[i].node, jac[static_cast<Eigen::Index>(i)]);
            }
        }
        return gradient_from_adjoints(
            tape.backward_seeded(std::span<const std::pair<Tape::NodeId, double>>(seeds)), inst);
    };
    return reduce_samples(n_samples, q.param_count(), threads, job);
}

}  // namespace diffabm
