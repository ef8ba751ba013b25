#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

#include "diffabm/bh.hpp"
#include "diffabm/objective.hpp"

using namespace diffabm;

namespace {

BhAux test_aux(int steps) {
    BhAux aux;
    aux.steps = steps;
    return aux;
}

std::array<double, 4> truth() { return {0.9, 0.9, 0.2, -0.2}; }

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// Central difference with one Richardson refinement; the plain h^2 error is
// not small enough against the beta = 120 softmax curvature.
template <class F>
double central_diff(F&& f, double at, double h = 1e-4) {
    const double d1 = (f(at + h) - f(at - h)) / (2 * h);
    const double d2 = (f(at + h / 2) - f(at - h / 2)) / h;
    return (4.0 * d2 - d1) / 3.0;
}

}  // namespace

TEST_CASE("transition at the all-zero fixed point") {
    BhAux aux = test_aux(1);
    std::array<double, 4> theta{0.0, 0.0, 0.0, 0.0};
    const double mean = bh_transition(std::span<const double>(theta), 0.0, 0.0, 0.0, aux);
    CHECK(mean == doctest::Approx(0.0));
}

TEST_CASE("first price from symmetric biases is zero") {
    BhAux aux = test_aux(1);
    std::array<double, 4> theta{0.0, 0.0, 0.2, -0.2};
    std::vector<double> noise{0.0};
    auto prices = bh_simulate_with_noise(std::span<const double>(theta), aux,
                                         std::span<const double>(noise), kFullHorizon);
    CHECK(prices[0] == doctest::Approx(0.0));
}

TEST_CASE("first price from unit noise is sigma over R") {
    BhAux aux = test_aux(1);
    std::array<double, 4> theta{0.5, -0.3, 0.0, 0.0};
    std::vector<double> noise{1.0};
    auto prices = bh_simulate_with_noise(std::span<const double>(theta), aux,
                                         std::span<const double>(noise), kFullHorizon);
    CHECK(prices[0] == doctest::Approx(0.04 / 1.01).epsilon(1e-12));
    CHECK(prices[0] == doctest::Approx(0.0396040).epsilon(1e-5));
}

TEST_CASE("price values are bit-identical across gradient horizons") {
    BhAux aux = test_aux(60);
    RngStream rng(21, 0);
    std::vector<double> noise(60);
    for (int t = 0; t < 60; ++t) noise[static_cast<std::size_t>(t)] = rng.normal_at(t);
    auto t4 = truth();

    std::vector<std::vector<double>> values;
    for (int h : {0, 1, 2, 3, 100}) {
        Tape tape;
        std::vector<TracedValue> theta;
        for (double v : t4) theta.push_back(make_leaf(tape, v));
        auto prices = bh_simulate_with_noise(std::span<const TracedValue>(theta), aux,
                                             std::span<const double>(noise), h);
        std::vector<double> vals;
        for (auto& p : prices) vals.push_back(p.value);
        values.push_back(std::move(vals));
    }
    for (std::size_t i = 1; i < values.size(); ++i) {
        for (std::size_t t = 0; t < values[i].size(); ++t) {
            CHECK(values[i][t] == values[0][t]);  // exactly equal
        }
    }

    // Plain-double and dual paths reproduce the traced values exactly too.
    auto plain = bh_simulate_with_noise(std::span<const double>(t4), aux,
                                        std::span<const double>(noise), kFullHorizon);
    std::vector<Dual> theta_dual;
    for (std::size_t i = 0; i < 4; ++i) theta_dual.push_back(Dual::seeded(t4[i], 4, static_cast<std::uint32_t>(i)));
    auto dual = bh_simulate_with_noise(std::span<const Dual>(theta_dual), aux,
                                       std::span<const double>(noise), kFullHorizon);
    for (std::size_t t = 0; t < plain.size(); ++t) {
        CHECK(plain[t] == values[0][t]);
        CHECK(dual[t].value() == values[0][t]);
    }
}

TEST_CASE("gradient of the first price w.r.t. b2 is 1/(R J) at any horizon") {
    BhAux aux = test_aux(1);
    std::vector<double> noise{0.37};
    for (int h : {0, 1, 5, kFullHorizon}) {
        Tape tape;
        std::vector<TracedValue> theta;
        for (double v : truth()) theta.push_back(make_leaf(tape, v));
        auto prices = bh_simulate_with_noise(std::span<const TracedValue>(theta), aux,
                                             std::span<const double>(noise), h);
        auto adj = backward(tape, prices[0]);
        CHECK(gradient_wrt(adj, theta[2]) ==
              doctest::Approx(1.0 / (1.01 * 4.0)).epsilon(1e-12));
        CHECK(gradient_wrt(adj, theta[2]) == doctest::Approx(0.2475248).epsilon(1e-6));
    }
}

TEST_CASE("all-zero noise and zero theta stay at the fixed point") {
    BhAux aux = test_aux(30);
    std::array<double, 4> theta{0.0, 0.0, 0.0, 0.0};
    std::vector<double> noise(30, 0.0);
    auto prices = bh_simulate_with_noise(std::span<const double>(theta), aux,
                                         std::span<const double>(noise), kFullHorizon);
    for (double x : prices) CHECK(x == doctest::Approx(0.0));
}

TEST_CASE("full-horizon reverse gradients match finite differences") {
    BhAux aux = test_aux(15);
    RngStream rng(77, 0);
    int checked = 0;
    for (int rep = 0; rep < 50; ++rep) {
        RngStream noise_rng = rng.substream(static_cast<std::uint64_t>(rep));
        std::vector<double> noise(15);
        for (int t = 0; t < 15; ++t) noise[static_cast<std::size_t>(t)] = noise_rng.normal_at(t);
        std::array<double, 4> theta;
        for (auto& v : theta) v = 2.0 * noise_rng.next_uniform() - 1.0;

        Tape tape;
        std::vector<TracedValue> leaves;
        for (double v : theta) leaves.push_back(make_leaf(tape, v));
        auto prices = bh_simulate_with_noise(std::span<const TracedValue>(leaves), aux,
                                             std::span<const double>(noise), kFullHorizon);
        auto adj = backward(tape, prices.back());

        for (int i = 0; i < 4; ++i) {
            auto value_at = [&](double v) {
                auto shifted = theta;
                shifted[static_cast<std::size_t>(i)] = v;
                return bh_simulate_with_noise(std::span<const double>(shifted), aux,
                                              std::span<const double>(noise), kFullHorizon)
                    .back();
            };
            const double fd = central_diff(value_at, theta[static_cast<std::size_t>(i)]);
            CHECK(rel_err(gradient_wrt(adj, leaves[static_cast<std::size_t>(i)]), fd) <= 1e-4);
            ++checked;
        }
    }
    CHECK(checked == 200);
}

TEST_CASE("gradient-relevant node count is nondecreasing in the horizon") {
    BhAux aux = test_aux(40);
    RngStream rng(5, 1);
    std::vector<double> noise(40);
    for (int t = 0; t < 40; ++t) noise[static_cast<std::size_t>(t)] = rng.normal_at(t);
    std::size_t previous = 0;
    for (int h : {0, 1, 2, 3, 100}) {
        Tape tape;
        std::vector<TracedValue> theta;
        for (double v : truth()) theta.push_back(make_leaf(tape, v));
        (void)bh_simulate_with_noise(std::span<const TracedValue>(theta), aux,
                                     std::span<const double>(noise), h);
        CHECK(tape.size() >= previous);
        previous = tape.size();
    }
}

TEST_CASE("identical seeds reproduce trajectories bit-identically") {
    BhAux aux = test_aux(25);
    auto t4 = truth();
    auto a = bh_simulate<double>(std::span<const double>(t4), aux, RngStream(9, 9), kFullHorizon);
    auto b = bh_simulate<double>(std::span<const double>(t4), aux, RngStream(9, 9), kFullHorizon);
    REQUIRE(a.prices.size() == b.prices.size());
    for (std::size_t t = 0; t < a.prices.size(); ++t) CHECK(a.prices[t] == b.prices[t]);
    for (std::size_t t = 0; t < a.noise.size(); ++t) CHECK(a.noise[t] == b.noise[t]);
}

TEST_CASE("input validation") {
    BhAux aux = test_aux(5);
    auto t4 = truth();
    std::vector<double> noise(5, 0.0);
    CHECK_THROWS_AS(bh_simulate_with_noise(std::span<const double>(t4), aux,
                                           std::span<const double>(noise), -1),
                    std::invalid_argument);
    std::vector<double> short_noise(3, 0.0);
    CHECK_THROWS_AS(bh_simulate_with_noise(std::span<const double>(t4), aux,
                                           std::span<const double>(short_noise), 0),
                    std::invalid_argument);
    BhAux bad = aux;
    bad.noise_scale = 0.0;
    CHECK_THROWS_AS(bh_simulate_with_noise(std::span<const double>(t4), bad,
                                           std::span<const double>(noise), 0),
                    std::invalid_argument);
}

TEST_CASE("gradient of MMD2 through the simulator matches finite differences") {
    BhAux aux = test_aux(12);
    RngStream rng(31, 2);
    std::vector<double> noise(12);
    for (int t = 0; t < 12; ++t) noise[static_cast<std::size_t>(t)] = rng.normal_at(t);
    auto t4 = truth();
    std::vector<double> observed = bh_simulate_with_noise(std::span<const double>(t4), aux,
                                                          std::span<const double>(noise),
                                                          kFullHorizon);
    GaussianKernel kernel(median_heuristic(observed));

    RngStream sim_rng(32, 3);
    std::vector<double> sim_noise(12);
    for (int t = 0; t < 12; ++t) sim_noise[static_cast<std::size_t>(t)] = sim_rng.normal_at(t);
    std::array<double, 4> theta{0.4, 0.2, 0.1, -0.05};

    auto loss_at = [&](std::span<const double> th) {
        auto prices = bh_simulate_with_noise(th, aux, std::span<const double>(sim_noise),
                                             kFullHorizon);
        return mmd2(std::span<const double>(prices), std::span<const double>(observed), kernel);
    };

    Tape tape;
    std::vector<TracedValue> leaves;
    for (double v : theta) leaves.push_back(make_leaf(tape, v));
    auto prices = bh_simulate_with_noise(std::span<const TracedValue>(leaves), aux,
                                         std::span<const double>(sim_noise), kFullHorizon);
    TracedValue loss = mmd2(std::span<const TracedValue>(prices),
                            std::span<const double>(observed), kernel);
    auto adj = backward(tape, loss);

    const double h = 1e-5;
    for (int i = 0; i < 4; ++i) {
        auto shifted = theta;
        shifted[static_cast<std::size_t>(i)] += h;
        const double fp = loss_at(shifted);
        shifted[static_cast<std::size_t>(i)] -= 2 * h;
        const double fm = loss_at(shifted);
        const double fd = (fp - fm) / (2 * h);
        CHECK(rel_err(gradient_wrt(adj, leaves[static_cast<std::size_t>(i)]), fd) <= 1e-4);
    }
}
