#include "diffabm/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <thread>

namespace diffabm {

namespace {

struct SampleOutcome {
    Eigen::VectorXd gradient;  // d(loss_n + w * kl_n)/d phi
    double loss_value = 0.0;
    double kl_value = 0.0;
};

// KL contribution on the sample's tape: closed form when the family has
// one, otherwise the per-sample log q - log pi estimate.
TracedValue kl_term_traced(const VariationalFamily& q, const StandardNormalPrior& prior,
                           Tape& tape, const VariationalFamily::Instantiated& inst,
                           const VariationalFamily::TracedSample& sample) {
    if (q.has_closed_form_kl()) return q.kl_to_std_normal_traced(tape, inst);
    return sample.log_density - prior.log_prob_traced(sample.theta);
}

Eigen::VectorXd adjoints_to_gradient(const std::vector<double>& adjoints,
                                     const VariationalFamily::Instantiated& inst) {
    Eigen::VectorXd g(static_cast<Eigen::Index>(inst.params.size()));
    for (std::size_t i = 0; i < inst.params.size(); ++i) {
        g[static_cast<Eigen::Index>(i)] = gradient_wrt(adjoints, inst.params[i]);
    }
    return g;
}

SampleOutcome pathwise_sample(const VariationalFamily& q, const SimulatorLoss& loss,
                              const StandardNormalPrior& prior, const TrainConfig& cfg,
                              const RngStream& epoch_rng, int n) {
    Tape tape;
    auto inst = q.instantiate(tape);
    auto sample = q.sample_traced(tape, inst, detail::theta_noise_stream(epoch_rng, n));
    TracedValue loss_value = loss.eval_traced(tape, sample.theta, cfg.horizon,
                                              detail::sim_noise_stream(epoch_rng, n));
    TracedValue kl = kl_term_traced(q, prior, tape, inst, sample);
    TracedValue objective = loss_value + cfg.gvi.w * kl;
    SampleOutcome out;
    out.loss_value = value_of(loss_value);
    out.kl_value = value_of(kl);
    if (objective.attached()) {
        out.gradient = adjoints_to_gradient(tape.backward(objective.node), inst);
    } else {
        out.gradient = Eigen::VectorXd::Zero(q.param_count());
    }
    return out;
}

SampleOutcome score_sample(const VariationalFamily& q, const SimulatorLoss& loss,
                           const StandardNormalPrior& prior, const TrainConfig& cfg,
                           const RngStream& epoch_rng, int n) {
    const RngStream theta_noise = detail::theta_noise_stream(epoch_rng, n);
    const Eigen::VectorXd theta = q.sample_values(theta_noise);
    const std::span<const double> theta_span(theta.data(),
                                             static_cast<std::size_t>(theta.size()));
    const double loss_value = loss.eval_plain(theta_span, detail::sim_noise_stream(epoch_rng, n));

    Tape tape;
    auto inst = q.instantiate(tape);
    // The same base noise reproduces theta bit-identically, giving the
    // reparameterised KL path on this tape.
    auto sample = q.sample_traced(tape, inst, theta_noise);
    TracedValue kl = kl_term_traced(q, prior, tape, inst, sample);
    TracedValue log_q_fixed = q.log_prob_traced(tape, inst, theta_span);

    std::vector<std::pair<Tape::NodeId, double>> seeds;
    if (log_q_fixed.attached()) seeds.emplace_back(log_q_fixed.node, loss_value);
    if (kl.attached()) seeds.emplace_back(kl.node, cfg.gvi.w);
    SampleOutcome out;
    out.loss_value = loss_value;
    out.kl_value = value_of(kl);
    out.gradient = adjoints_to_gradient(
        tape.backward_seeded(std::span<const std::pair<Tape::NodeId, double>>(seeds)), inst);
    return out;
}

SampleOutcome hybrid_sample(const VariationalFamily& q, const SimulatorLoss& loss,
                            const StandardNormalPrior& prior, const TrainConfig& cfg,
                            const RngStream& epoch_rng, int n) {
    Tape tape;
    auto inst = q.instantiate(tape);
    auto sample = q.sample_traced(tape, inst, detail::theta_noise_stream(epoch_rng, n));
    const std::size_t d = sample.theta.size();
    std::vector<double> theta(d);
    for (std::size_t i = 0; i < d; ++i) theta[i] = sample.theta[i].value;

    // Simulator Jacobian by forward mode; no simulator tape is allocated.
    const RngStream sim_noise = detail::sim_noise_stream(epoch_rng, n);
    double loss_value = 0.0;
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
        loss_value = out.value();
    }

    TracedValue kl = kl_term_traced(q, prior, tape, inst, sample);
    std::vector<std::pair<Tape::NodeId, double>> seeds;
    seeds.reserve(d + 1);
    for (std::size_t i = 0; i < d; ++i) {
        if (sample.theta[i].attached()) {
            seeds.emplace_back(sample.theta[i].node, jac[static_cast<Eigen::Index>(i)]);
        }
    }
    if (kl.attached()) seeds.emplace_back(kl.node, cfg.gvi.w);
    SampleOutcome out;
    out.loss_value = loss_value;
    out.kl_value = value_of(kl);
    out.gradient = adjoints_to_gradient(
        tape.backward_seeded(std::span<const std::pair<Tape::NodeId, double>>(seeds)), inst);
    return out;
}

}  // namespace

std::vector<EpochRecord> train(VariationalFamily& q, const SimulatorLoss& loss,
                               const TrainConfig& config, const RngStream& rng) {
    config.validate();
    const StandardNormalPrior prior{q.dim()};
    Eigen::VectorXd phi = q.parameters();
    AdamWState optimizer(q.param_count(), config.adamw);
    std::vector<EpochRecord> log;
    log.reserve(static_cast<std::size_t>(config.epochs));

    using Clock = std::chrono::steady_clock;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto started = Clock::now();
        const RngStream epoch_rng = rng.substream(static_cast<std::uint64_t>(epoch));
        const int n = config.gvi.n_samples;

        std::vector<SampleOutcome> outcomes(static_cast<std::size_t>(n));
        auto run_one = [&](int i) {
            switch (config.estimator) {
                case EstimatorKind::pathwise:
                    outcomes[static_cast<std::size_t>(i)] =
                        pathwise_sample(q, loss, prior, config, epoch_rng, i);
                    break;
                case EstimatorKind::score:
                    outcomes[static_cast<std::size_t>(i)] =
                        score_sample(q, loss, prior, config, epoch_rng, i);
                    break;
                case EstimatorKind::hybrid:
                    outcomes[static_cast<std::size_t>(i)] =
                        hybrid_sample(q, loss, prior, config, epoch_rng, i);
                    break;
            }
        };
        if (config.threads <= 1 || n == 1) {
            for (int i = 0; i < n; ++i) run_one(i);
        } else {
            const int workers = std::min(config.threads, n);
            std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
            std::vector<std::thread> pool;
            for (int w = 0; w < workers; ++w) {
                pool.emplace_back([&, w]() {
                    try {
                        for (int i = w; i < n; i += workers) run_one(i);
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

        // Reduce in sample-index order so results are parallelism-invariant.
        Eigen::VectorXd gradient = Eigen::VectorXd::Zero(q.param_count());
        double loss_term = 0.0;
        double kl_term = 0.0;
        for (int i = 0; i < n; ++i) {
            gradient += outcomes[static_cast<std::size_t>(i)].gradient;
            loss_term += outcomes[static_cast<std::size_t>(i)].loss_value;
            kl_term += outcomes[static_cast<std::size_t>(i)].kl_value;
        }
        gradient /= double(n);
        loss_term /= double(n);
        kl_term /= double(n);
        const double objective = loss_term + config.gvi.w * kl_term;
        if (!std::isfinite(objective)) {
            throw TrainAbort(epoch, "non-finite objective");
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.objective = objective;
        rec.loss_term = loss_term;
        rec.kl_term = kl_term;
        if (!optimizer_step(optimizer, phi, gradient)) {
            rec.step_rejected = true;
            std::fprintf(stderr, "train: non-finite gradient at epoch %d; step rejected\n",
                         epoch);
        } else {
            q.set_parameters(phi);
        }
        rec.wall_ms =
            std::chrono::duration<double, std::milli>(Clock::now() - started).count();
        log.push_back(rec);
    }
    return log;
}

std::vector<double> moving_average(const std::vector<double>& values, int window) {
    if (window < 1) throw std::invalid_argument("moving_average: window must be >= 1");
    std::vector<double> out(values.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        acc += values[i];
        if (i >= static_cast<std::size_t>(window)) acc -= values[i - static_cast<std::size_t>(window)];
        const double span = double(std::min<std::size_t>(i + 1, static_cast<std::size_t>(window)));
        out[i] = acc / span;
    }
    return out;
}

}  // namespace diffabm
