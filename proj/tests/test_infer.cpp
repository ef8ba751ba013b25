#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "diffabm/estimators.hpp"
#include "diffabm/losses.hpp"
#include "diffabm/optimizer.hpp"
#include "diffabm/train.hpp"
#include "diffabm/variational.hpp"

using namespace diffabm;

namespace {

class ConstLoss final : public SimulatorLoss {
  public:
    explicit ConstLoss(double c, int dim) : c_(c), dim_(dim) {}
    int theta_dim() const override { return dim_; }
    TracedValue eval_traced(Tape&, std::span<const TracedValue>, int, RngStream) const override {
        return TracedValue(c_);
    }
    Dual eval_dual(std::span<const Dual>, RngStream) const override { return Dual(c_); }
    double eval_plain(std::span<const double>, RngStream) const override { return c_; }

  private:
    double c_;
    int dim_;
};

// l(theta) = theta_0^2.
class QuadraticLoss final : public SimulatorLoss {
  public:
    explicit QuadraticLoss(int dim) : dim_(dim) {}
    int theta_dim() const override { return dim_; }
    TracedValue eval_traced(Tape&, std::span<const TracedValue> t, int, RngStream) const override {
        return t[0] * t[0];
    }
    Dual eval_dual(std::span<const Dual> t, RngStream) const override { return t[0] * t[0]; }
    double eval_plain(std::span<const double> t, RngStream) const override { return t[0] * t[0]; }

  private:
    int dim_;
};

// l(theta) = theta_0.
class LinearLoss final : public SimulatorLoss {
  public:
    explicit LinearLoss(int dim) : dim_(dim) {}
    int theta_dim() const override { return dim_; }
    TracedValue eval_traced(Tape&, std::span<const TracedValue> t, int, RngStream) const override {
        return t[0] + 0.0;
    }
    Dual eval_dual(std::span<const Dual> t, RngStream) const override { return t[0] + 0.0; }
    double eval_plain(std::span<const double> t, RngStream) const override { return t[0]; }

  private:
    int dim_;
};

bool within_3se(double estimate, double truth, double stddev, int n) {
    return std::abs(estimate - truth) <= 3.0 * stddev / std::sqrt(double(n)) + 1e-12;
}

}  // namespace

TEST_CASE("reparameterised sampling of the diagonal Gaussian") {
    Eigen::VectorXd mu(2), ls(2);
    mu << 0.4, -1.1;
    ls << -0.7, 0.3;
    DiagonalGaussian q(mu, ls);

    SUBCASE("affine form and gradients") {
        Tape tape;
        auto inst = q.instantiate(tape);
        RngStream noise(8, 1);
        auto s = q.sample_traced(tape, inst, noise);
        for (int i = 0; i < 2; ++i) {
            const double u = noise.normal_at(static_cast<std::uint64_t>(i));
            const double sigma = std::exp(ls[i]);
            CHECK(s.theta[static_cast<std::size_t>(i)].value ==
                  doctest::Approx(mu[i] + sigma * u).epsilon(1e-14));
            auto adj = backward(tape, s.theta[static_cast<std::size_t>(i)]);
            CHECK(gradient_wrt(adj, inst.params[static_cast<std::size_t>(i)]) ==
                  doctest::Approx(1.0));
            CHECK(gradient_wrt(adj, inst.params[static_cast<std::size_t>(2 + i)]) ==
                  doctest::Approx(sigma * u).epsilon(1e-12));
        }
    }
    SUBCASE("log-density matches the closed form at the sample") {
        Tape tape;
        auto inst = q.instantiate(tape);
        RngStream noise(9, 2);
        auto s = q.sample_traced(tape, inst, noise);
        double expected = 0.0;
        for (int i = 0; i < 2; ++i) {
            const double sigma = std::exp(ls[i]);
            const double z = (s.theta[static_cast<std::size_t>(i)].value - mu[i]) / sigma;
            expected += -ls[i] - 0.5 * z * z - 0.5 * std::log(2.0 * std::numbers::pi);
        }
        CHECK(s.log_density.value == doctest::Approx(expected).epsilon(1e-12));
        // Density evaluation of the same point agrees.
        std::vector<double> theta_vals{s.theta[0].value, s.theta[1].value};
        TracedValue lp = q.log_prob_traced(tape, inst, theta_vals);
        CHECK(lp.value == doctest::Approx(s.log_density.value).epsilon(1e-12));
    }
    SUBCASE("traced and plain sampling produce identical values") {
        Tape tape;
        auto inst = q.instantiate(tape);
        for (int rep = 0; rep < 20; ++rep) {
            RngStream noise(33, static_cast<std::uint64_t>(rep));
            auto s = q.sample_traced(tape, inst, noise);
            Eigen::VectorXd v = q.sample_values(noise);
            CHECK(s.theta[0].value == v[0]);
            CHECK(s.theta[1].value == v[1]);
        }
    }
}

TEST_CASE("masked autoregressive flow") {
    MaskedAutoregressiveFlow::Config cfg;
    cfg.dim = 3;
    cfg.layers = 16;
    cfg.hidden = 20;
    MaskedAutoregressiveFlow flow(cfg, RngStream(51, 0));

    SUBCASE("sampling log-density equals density evaluation of the sample") {
        // Move away from the identity initialisation first.
        Eigen::VectorXd phi = flow.parameters();
        RngStream jitter(4, 4);
        for (Eigen::Index i = 0; i < phi.size(); ++i) {
            phi[i] += 0.05 * (2.0 * jitter.uniform_at(static_cast<std::uint64_t>(i)) - 1.0);
        }
        flow.set_parameters(phi);
        for (int rep = 0; rep < 100; ++rep) {
            auto [theta, log_q_path] = flow.sample_with_log_density(
                RngStream(600, static_cast<std::uint64_t>(rep)));
            const double log_q_eval = flow.log_prob(
                std::span<const double>(theta.data(), static_cast<std::size_t>(theta.size())));
            CHECK(std::abs(log_q_path - log_q_eval) <= 1e-8);
        }
    }
    SUBCASE("traced round trip matches as well") {
        Tape tape;
        auto inst = flow.instantiate(tape);
        auto s = flow.sample_traced(tape, inst, RngStream(61, 1));
        std::vector<double> theta_vals;
        for (auto& t : s.theta) theta_vals.push_back(t.value);
        TracedValue lp = flow.log_prob_traced(tape, inst, theta_vals);
        CHECK(std::abs(lp.value - s.log_density.value) <= 1e-8);
    }
    SUBCASE("identity initialisation gives a standard normal") {
        MaskedAutoregressiveFlow fresh(cfg, RngStream(52, 0));
        auto [theta, log_q] = fresh.sample_with_log_density(RngStream(62, 2));
        double expected = -0.5 * 3.0 * std::log(2.0 * std::numbers::pi);
        for (int i = 0; i < 3; ++i) expected -= 0.5 * theta[i] * theta[i];
        // Scales start at 1 + 1e-3, so log-dets are ~3e-3 per layer, not 0.
        CHECK(log_q == doctest::Approx(expected).epsilon(0.05));
        for (int i = 0; i < 3; ++i) CHECK(std::isfinite(theta[i]));
    }
    SUBCASE("10^4 samples have finite, seed-stable log-densities") {
        double means[2] = {0.0, 0.0};
        for (int seed = 0; seed < 2; ++seed) {
            RngStream rng(700 + seed, 0);
            double acc = 0.0;
            for (int i = 0; i < 10000; ++i) {
                auto [theta, log_q] =
                    flow.sample_with_log_density(rng.substream(static_cast<std::uint64_t>(i)));
                REQUIRE(std::isfinite(log_q));
                acc += log_q;
            }
            means[seed] = acc / 10000.0;
            CHECK(std::isfinite(means[seed]));
        }
        CHECK(std::abs(means[0] - means[1]) <= 0.05 * std::abs(means[0]));
    }
    SUBCASE("traced and plain sampling produce identical values") {
        Tape tape;
        auto inst = flow.instantiate(tape);
        RngStream noise(73, 5);
        auto s = flow.sample_traced(tape, inst, noise);
        Eigen::VectorXd v = flow.sample_values(noise);
        for (int i = 0; i < 3; ++i) CHECK(s.theta[static_cast<std::size_t>(i)].value == v[i]);
    }
}

TEST_CASE("pathwise estimator") {
    Eigen::VectorXd mu(2), ls(2);
    mu << 0.8, -0.2;
    ls << -0.5, -0.5;
    DiagonalGaussian q(mu, ls);

    SUBCASE("constant loss gives zero gradient and zero std") {
        auto est = pathwise_gradient(q, ConstLoss(3.0, 2), kFullHorizon, 32, RngStream(1, 1));
        CHECK(est.mean.norm() == 0.0);
        CHECK(est.stddev.norm() == 0.0);
    }
    SUBCASE("quadratic toy matches the analytic gradient") {
        const int n = 10000;
        auto est = pathwise_gradient(q, QuadraticLoss(2), kFullHorizon, n, RngStream(2, 1));
        // E[theta_0^2] = mu^2 + sigma^2: d/dmu = 2 mu, d/dlogsigma = 2 sigma^2.
        const double sigma = std::exp(ls[0]);
        CHECK(within_3se(est.mean[0], 2.0 * mu[0], est.stddev[0], n));
        CHECK(within_3se(est.mean[2], 2.0 * sigma * sigma, est.stddev[2], n));
        CHECK(est.mean[1] == 0.0);  // loss ignores theta_1
    }
}

TEST_CASE("score estimator") {
    Eigen::VectorXd mu(2), ls(2);
    mu << 0.3, 0.1;
    ls << 0.0, 0.0;
    DiagonalGaussian q(mu, ls);

    SUBCASE("zero-mean property with constant loss") {
        const int n = 10000;
        auto est = score_gradient(q, ConstLoss(1.0, 2), n, RngStream(10, 0));
        for (int i = 0; i < 4; ++i) {
            CHECK(within_3se(est.mean[i], 0.0, est.stddev[i], n));
            CHECK(est.stddev[i] > 0.0);  // score itself is nonzero sample by sample
        }
    }
    SUBCASE("linear toy matches the analytic gradient") {
        const int n = 10000;
        auto est = score_gradient(q, LinearLoss(2), n, RngStream(11, 0));
        CHECK(within_3se(est.mean[0], 1.0, est.stddev[0], n));
        CHECK(within_3se(est.mean[1], 0.0, est.stddev[1], n));
    }
}

TEST_CASE("estimator consistency on the quadratic toy") {
    Eigen::VectorXd mu(2), ls(2);
    mu << 0.6, -0.4;
    ls << -0.3, -0.3;
    DiagonalGaussian q(mu, ls);
    QuadraticLoss loss(2);

    const int np = 4000, ns = 20000, nh = 4000;
    auto pw = pathwise_gradient(q, loss, kFullHorizon, np, RngStream(21, 0));
    auto sc = score_gradient(q, loss, ns, RngStream(22, 0));
    auto hy = hybrid_gradient(q, loss, nh, RngStream(23, 0));
    for (int i = 0; i < 4; ++i) {
        const double se_ps = std::sqrt(pw.stddev[i] * pw.stddev[i] / np +
                                       sc.stddev[i] * sc.stddev[i] / ns);
        const double se_ph = std::sqrt(pw.stddev[i] * pw.stddev[i] / np +
                                       hy.stddev[i] * hy.stddev[i] / nh);
        CHECK(std::abs(pw.mean[i] - sc.mean[i]) <= 3.0 * se_ps + 1e-12);
        CHECK(std::abs(pw.mean[i] - hy.mean[i]) <= 3.0 * se_ph + 1e-12);
    }
}

TEST_CASE("hybrid equals pathwise at full horizon with identical seeds") {
    BhAux aux;
    aux.steps = 20;
    std::array<double, 4> truth{0.9, 0.9, 0.2, -0.2};
    auto observed = bh_ground_truth_prices({0.9, 0.9, 0.2, -0.2}, aux, RngStream(900, 0));
    BhMmdLoss loss(observed, aux);

    MaskedAutoregressiveFlow::Config cfg;
    cfg.dim = 4;
    cfg.layers = 4;
    cfg.hidden = 12;
    MaskedAutoregressiveFlow flow(cfg, RngStream(91, 0));

    const int n = 3;
    auto pw = pathwise_gradient(flow, loss, kFullHorizon, n, RngStream(92, 0));
    auto hy = hybrid_gradient(flow, loss, n, RngStream(92, 0));
    REQUIRE(pw.mean.size() == hy.mean.size());
    double num = 0.0, den = 0.0;
    for (Eigen::Index i = 0; i < pw.mean.size(); ++i) {
        num += (pw.mean[i] - hy.mean[i]) * (pw.mean[i] - hy.mean[i]);
        den += pw.mean[i] * pw.mean[i];
    }
    REQUIRE(den > 0.0);
    CHECK(std::sqrt(num / den) <= 1e-8);
    (void)truth;
}

TEST_CASE("forward mode allocates nothing while a family tape is live") {
    DiagonalGaussian q(2);
    QuadraticLoss loss(2);
    Tape tape;
    auto inst = q.instantiate(tape);
    auto s = q.sample_traced(tape, inst, RngStream(31, 0));
    const std::size_t after_sample = tape.size();
    std::vector<Dual> duals{Dual::seeded(s.theta[0].value, 2, 0),
                            Dual::seeded(s.theta[1].value, 2, 1)};
    (void)loss.eval_dual(std::span<const Dual>(duals), RngStream(32, 0));
    CHECK(tape.size() == after_sample);
}

TEST_CASE("AdamW") {
    SUBCASE("zero gradient and zero decay leave parameters unchanged") {
        AdamWConfig cfg;
        cfg.weight_decay = 0.0;
        AdamWState state(3, cfg);
        Eigen::VectorXd phi = Eigen::VectorXd::Constant(3, 1.5);
        const Eigen::VectorXd before = phi;
        CHECK(optimizer_step(state, phi, Eigen::VectorXd::Zero(3)));
        CHECK((phi - before).norm() == 0.0);
        CHECK(state.step == 1);
    }
    SUBCASE("first step moves by about -lr sign(g)") {
        AdamWConfig cfg;
        cfg.weight_decay = 0.0;
        AdamWState state(2, cfg);
        Eigen::VectorXd phi = Eigen::VectorXd::Zero(2);
        Eigen::VectorXd g(2);
        g << 0.3, -4.0;
        CHECK(optimizer_step(state, phi, g));
        CHECK(phi[0] == doctest::Approx(-cfg.learning_rate).epsilon(1e-6));
        CHECK(phi[1] == doctest::Approx(cfg.learning_rate).epsilon(1e-6));
    }
    SUBCASE("pure decoupled decay shrinks parameters") {
        AdamWConfig cfg;
        cfg.weight_decay = 0.7;
        AdamWState state(2, cfg);
        Eigen::VectorXd phi = Eigen::VectorXd::Constant(2, 2.0);
        CHECK(optimizer_step(state, phi, Eigen::VectorXd::Zero(2)));
        CHECK(phi[0] == doctest::Approx(2.0 * (1.0 - cfg.learning_rate * cfg.weight_decay))
                            .epsilon(1e-12));
    }
    SUBCASE("non-finite gradient rejects the step") {
        AdamWState state(1);
        Eigen::VectorXd phi = Eigen::VectorXd::Ones(1);
        Eigen::VectorXd g(1);
        g << std::numeric_limits<double>::quiet_NaN();
        CHECK_FALSE(optimizer_step(state, phi, g));
        CHECK(phi[0] == 1.0);
        CHECK(state.step == 0);
    }
    SUBCASE("loss on a convex quadratic decreases monotonically after step 10") {
        AdamWConfig cfg;
        cfg.learning_rate = 0.05;
        cfg.weight_decay = 0.0;
        AdamWState state(2, cfg);
        Eigen::VectorXd phi(2);
        phi << 3.0, -2.0;
        Eigen::VectorXd target(2);
        target << 0.5, 1.0;
        auto f = [&](const Eigen::VectorXd& p) { return 0.5 * (p - target).squaredNorm(); };
        double prev = f(phi);
        for (int step = 1; step <= 150; ++step) {
            Eigen::VectorXd g = phi - target;
            CHECK(optimizer_step(state, phi, g));
            const double now = f(phi);
            if (step > 10) CHECK(now < prev);
            prev = now;
        }
    }
}

TEST_CASE("train") {
    Eigen::VectorXd mu(2), ls(2);
    mu << 1.2, -0.8;
    ls << 0.0, 0.0;

    SUBCASE("zero epochs leave the family unchanged") {
        DiagonalGaussian q(mu, ls);
        TrainConfig cfg;
        cfg.epochs = 0;
        auto log = train(q, QuadraticLoss(2), cfg, RngStream(41, 0));
        CHECK(log.empty());
        CHECK((q.parameters() - DiagonalGaussian(mu, ls).parameters()).norm() == 0.0);
    }
    SUBCASE("identical seeds give identical loss logs") {
        TrainConfig cfg;
        cfg.epochs = 8;
        cfg.gvi.n_samples = 3;
        for (EstimatorKind kind :
             {EstimatorKind::pathwise, EstimatorKind::score, EstimatorKind::hybrid}) {
            cfg.estimator = kind;
            DiagonalGaussian qa(mu, ls), qb(mu, ls);
            auto la = train(qa, QuadraticLoss(2), cfg, RngStream(42, 0));
            auto lb = train(qb, QuadraticLoss(2), cfg, RngStream(42, 0));
            REQUIRE(la.size() == lb.size());
            for (std::size_t i = 0; i < la.size(); ++i) {
                CHECK(la[i].objective == lb[i].objective);
                CHECK(la[i].loss_term == lb[i].loss_term);
                CHECK(la[i].kl_term == lb[i].kl_term);
            }
            CHECK((qa.parameters() - qb.parameters()).norm() == 0.0);
        }
    }
    SUBCASE("parallel sample evaluation changes nothing") {
        TrainConfig cfg;
        cfg.epochs = 6;
        cfg.gvi.n_samples = 4;
        cfg.estimator = EstimatorKind::pathwise;
        DiagonalGaussian qa(mu, ls), qb(mu, ls);
        cfg.threads = 1;
        auto la = train(qa, QuadraticLoss(2), cfg, RngStream(43, 0));
        cfg.threads = 4;
        auto lb = train(qb, QuadraticLoss(2), cfg, RngStream(43, 0));
        for (std::size_t i = 0; i < la.size(); ++i) {
            CHECK(la[i].objective == lb[i].objective);
        }
        CHECK((qa.parameters() - qb.parameters()).norm() == 0.0);
    }
    SUBCASE("training pulls the mean of a quadratic toward zero") {
        DiagonalGaussian q(mu, ls);
        TrainConfig cfg;
        cfg.epochs = 400;
        cfg.gvi.w = 1e-3;
        cfg.gvi.n_samples = 5;
        cfg.adamw.learning_rate = 2e-2;
        auto log = train(q, QuadraticLoss(2), cfg, RngStream(44, 0));
        CHECK(std::abs(q.mu()[0]) < 0.25);
        CHECK(log.back().loss_term < log.front().loss_term);
    }
}

TEST_CASE("moving average") {
    std::vector<double> v{1, 2, 3, 4, 5, 6};
    auto ma = moving_average(v, 3);
    CHECK(ma[0] == doctest::Approx(1.0));
    CHECK(ma[1] == doctest::Approx(1.5));
    CHECK(ma[2] == doctest::Approx(2.0));
    CHECK(ma[5] == doctest::Approx(5.0));
}
