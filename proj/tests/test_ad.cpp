#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <span>
#include <vector>

#include "diffabm/dual.hpp"
#include "diffabm/rng.hpp"
#include "diffabm/scalar_ops.hpp"
#include "diffabm/tape.hpp"

using namespace diffabm;

namespace {

// Using-declarations so the scalar-generic programs below resolve the
// double overloads from diffabm rather than the global C functions.
using diffabm::exp;
using diffabm::log;
using diffabm::pow;
using diffabm::sqrt;
using diffabm::tanh;

// Small scalar-generic program corpus shared by the agreement tests.
// Each entry is (arity, program); programs accept a span of any scalar kind.
struct CorpusProgram {
    int arity;
    double (*eval_plain)(std::span<const double>);
    TracedValue (*eval_traced)(std::span<const TracedValue>);
    Dual (*eval_dual)(std::span<const Dual>);
};

template <class S>
S prog_poly(std::span<const S> x) {
    return x[0] * x[1] + x[0] * x[0] * x[0] - 2.5 * x[1];
}

template <class S>
S prog_transcendental(std::span<const S> x) {
    return exp(x[0] * 0.3) + log(x[1] * x[1] + 1.5) - tanh(x[0] - x[1]);
}

template <class S>
S prog_rational(std::span<const S> x) {
    return (x[0] - x[1]) / (x[0] * x[0] + x[1] * x[1] + 2.0) + sqrt(x[0] * x[0] + 1.0);
}

template <class S>
S prog_softmaxish(std::span<const S> x) {
    std::vector<S> logits{x[0], x[1] * x[1], x[0] * x[1]};
    auto s = stable_softmax(std::span<const S>(logits), 3.0);
    return s[0] * 1.0 + s[1] * 2.0 + s[2] * 3.0;
}

template <class S>
S prog_powchain(std::span<const S> x) {
    return pow(x[0] * x[0] + 1.2, 1.7) / (1.0 + exp(-x[1]));
}

const CorpusProgram kCorpus[] = {
    {2, prog_poly<double>, prog_poly<TracedValue>, prog_poly<Dual>},
    {2, prog_transcendental<double>, prog_transcendental<TracedValue>,
     prog_transcendental<Dual>},
    {2, prog_rational<double>, prog_rational<TracedValue>, prog_rational<Dual>},
    {2, prog_softmaxish<double>, prog_softmaxish<TracedValue>, prog_softmaxish<Dual>},
    {2, prog_powchain<double>, prog_powchain<TracedValue>, prog_powchain<Dual>},
};

std::vector<double> reverse_gradient(const CorpusProgram& p, std::span<const double> x) {
    Tape tape;
    std::vector<TracedValue> leaves;
    for (double v : x) leaves.push_back(make_leaf(tape, v));
    TracedValue out = p.eval_traced(leaves);
    auto adj = backward(tape, out);
    std::vector<double> g;
    for (const auto& leaf : leaves) g.push_back(gradient_wrt(adj, leaf));
    return g;
}

std::vector<double> fd_gradient(const CorpusProgram& p, std::span<const double> x,
                                double h = 1e-5) {
    std::vector<double> g(x.size());
    std::vector<double> xp(x.begin(), x.end());
    for (std::size_t i = 0; i < x.size(); ++i) {
        xp[i] = x[i] + h;
        const double fp = p.eval_plain(xp);
        xp[i] = x[i] - h;
        const double fm = p.eval_plain(xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

}  // namespace

TEST_CASE("record_binary computes values and local partials") {
    Tape tape;
    TracedValue a = make_leaf(tape, 2.0);
    TracedValue b = make_leaf(tape, 3.0);
    TracedValue z = record_binary(OpKind::mul, a, b, tape);
    CHECK(z.value == doctest::Approx(6.0));
    auto adj = backward(tape, z);
    CHECK(gradient_wrt(adj, a) == doctest::Approx(3.0));
    CHECK(gradient_wrt(adj, b) == doctest::Approx(2.0));
}

TEST_CASE("exp at zero has value 1 and local partial 1") {
    Tape tape;
    TracedValue a = make_leaf(tape, 0.0);
    TracedValue z = record_unary(OpKind::exp, a, tape);
    CHECK(z.value == doctest::Approx(1.0));
    auto adj = backward(tape, z);
    CHECK(gradient_wrt(adj, a) == doctest::Approx(1.0));
}

TEST_CASE("add chain x+x+x accumulates gradient 3") {
    Tape tape;
    TracedValue x = make_leaf(tape, 1.0);
    TracedValue z = x + x + x;
    CHECK(z.value == doctest::Approx(3.0));
    auto adj = backward(tape, z);
    CHECK(gradient_wrt(adj, x) == doctest::Approx(3.0));
}

TEST_CASE("detach blocks gradient flow but preserves values") {
    SUBCASE("x * detach(x)") {
        Tape tape;
        TracedValue x = make_leaf(tape, 2.0);
        TracedValue z = x * detach(x);
        CHECK(z.value == doctest::Approx(4.0));
        auto adj = backward(tape, z);
        CHECK(gradient_wrt(adj, x) == doctest::Approx(2.0));
    }
    SUBCASE("detach(x) + x keeps one of two paths") {
        Tape tape;
        TracedValue x = make_leaf(tape, 1.0);
        TracedValue y = detach(x) + x;
        auto adj = backward(tape, y);
        CHECK(gradient_wrt(adj, x) == doctest::Approx(1.0));
    }
    SUBCASE("detach(x)*detach(x) has zero gradient and records nothing") {
        Tape tape;
        TracedValue x = make_leaf(tape, 5.0);
        const std::size_t before = tape.size();
        TracedValue y = detach(x) * detach(x);
        CHECK(y.value == doctest::Approx(25.0));
        CHECK_FALSE(y.attached());
        CHECK(tape.size() == before);
    }
    SUBCASE("detached value equals original") {
        TracedValue d = detach(TracedValue(5.0));
        CHECK(d.value == 5.0);
        CHECK_FALSE(d.attached());
    }
}

TEST_CASE("mixing two live tapes is an error") {
    Tape t1, t2;
    TracedValue a = make_leaf(t1, 1.0);
    TracedValue b = make_leaf(t2, 2.0);
    CHECK_THROWS_AS(a + b, std::logic_error);
}

TEST_CASE("domain errors") {
    Tape tape;
    TracedValue a = make_leaf(tape, -1.0);
    TracedValue zero = make_leaf(tape, 0.0);
    CHECK_THROWS_AS(log(a), std::domain_error);
    CHECK_THROWS_AS(sqrt(a), std::domain_error);
    CHECK_THROWS_AS(a / zero, std::domain_error);
    CHECK_THROWS_AS(backward(tape, TracedValue(1.0)), std::logic_error);
}

TEST_CASE("stable_softmax") {
    SUBCASE("symmetric logits at high scale") {
        std::vector<double> logits{0.0, 0.0};
        auto s = stable_softmax(logits, 120.0);
        CHECK(s[0] == doctest::Approx(0.5));
        CHECK(s[1] == doctest::Approx(0.5));
    }
    SUBCASE("huge logit does not overflow") {
        std::vector<double> logits{1000.0, 0.0};
        auto s = stable_softmax(logits, 1.0);
        CHECK(s[0] == doctest::Approx(1.0));
        CHECK(s[1] == doctest::Approx(0.0));
        CHECK(std::isfinite(s[0]));
    }
    SUBCASE("hand-computed two-category case") {
        std::vector<double> logits{1.0, 0.0};
        auto s = stable_softmax(logits, 1.0);
        const double e = std::exp(1.0);
        CHECK(s[0] == doctest::Approx(e / (1.0 + e)).epsilon(1e-12));
        CHECK(s[1] == doctest::Approx(1.0 / (1.0 + e)).epsilon(1e-12));
    }
    SUBCASE("outputs sum to 1 within 1e-12 for random traced logits") {
        RngStream rng(99, 0);
        for (int rep = 0; rep < 50; ++rep) {
            Tape tape;
            std::vector<TracedValue> logits;
            for (int i = 0; i < 5; ++i) {
                logits.push_back(make_leaf(tape, 10.0 * (rng.next_uniform() - 0.5)));
            }
            auto s = stable_softmax(std::span<const TracedValue>(logits), 120.0);
            double total = 0.0;
            for (auto& v : s) total += v.value;
            CHECK(std::abs(total - 1.0) <= 1e-12);
        }
    }
    SUBCASE("errors") {
        std::vector<double> empty;
        CHECK_THROWS_AS(stable_softmax(empty, 1.0), std::invalid_argument);
        std::vector<double> bad{std::numeric_limits<double>::quiet_NaN()};
        CHECK_THROWS_AS(stable_softmax(bad, 1.0), std::domain_error);
    }
}

TEST_CASE("gumbel_softmax") {
    SUBCASE("equal logits with equal noise give (0.5, 0.5) at any temperature") {
        for (double tau : {0.05, 0.5, 1.0, 7.0}) {
            std::vector<double> logits{0.7, 0.7};
            std::vector<double> noise{0.31, 0.31};
            auto s = gumbel_softmax_with_noise(std::span<const double>(logits), tau,
                                               std::span<const double>(noise));
            CHECK(s[0] == doctest::Approx(0.5).epsilon(1e-12));
        }
    }
    SUBCASE("temperature to zero approaches one-hot at argmax(logit+noise)") {
        std::vector<double> logits{0.2, 0.9, -0.3};
        std::vector<double> noise{1.4, 0.1, 0.2};
        auto s = gumbel_softmax_with_noise(std::span<const double>(logits), 1e-3,
                                           std::span<const double>(noise));
        CHECK(s[0] == doctest::Approx(1.0).epsilon(1e-9));  // argmax of logit+noise
        CHECK(s[1] == doctest::Approx(0.0).epsilon(1e-9));
    }
    SUBCASE("samples lie on the simplex") {
        RngStream rng(7, 3);
        std::vector<double> logits{0.3, -0.2, 1.1, 0.0};
        for (int rep = 0; rep < 200; ++rep) {
            auto s = sample_gumbel_softmax(logits, 0.4, rng);
            double total = 0.0;
            for (double v : s) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
                total += v;
            }
            CHECK(std::abs(total - 1.0) <= 1e-12);
        }
    }
    SUBCASE("temperature must be positive") {
        std::vector<double> logits{0.0, 0.0};
        RngStream rng(1, 1);
        CHECK_THROWS_AS(sample_gumbel_softmax(logits, 0.0, rng), std::invalid_argument);
    }
    SUBCASE("gradient w.r.t. logits matches finite differences") {
        std::vector<double> noise{0.4, -0.8};
        auto f = [&](double l0, double l1) {
            std::vector<double> logits{l0, l1};
            return gumbel_softmax_with_noise(std::span<const double>(logits), 0.5,
                                             std::span<const double>(noise))[0];
        };
        Tape tape;
        TracedValue l0 = make_leaf(tape, 0.3);
        TracedValue l1 = make_leaf(tape, -0.1);
        std::vector<TracedValue> logits{l0, l1};
        auto s = gumbel_softmax_with_noise(std::span<const TracedValue>(logits), 0.5,
                                           std::span<const double>(noise));
        auto adj = backward(tape, s[0]);
        const double h = 1e-6;
        const double fd0 = (f(0.3 + h, -0.1) - f(0.3 - h, -0.1)) / (2 * h);
        const double fd1 = (f(0.3, -0.1 + h) - f(0.3, -0.1 - h)) / (2 * h);
        CHECK(gradient_wrt(adj, l0) == doctest::Approx(fd0).epsilon(1e-6));
        CHECK(gradient_wrt(adj, l1) == doctest::Approx(fd1).epsilon(1e-6));
    }
}

TEST_CASE("forward_jacobian spot checks") {
    SUBCASE("theta^2") {
        auto f = [](std::span<const Dual> x) { return x[0] * x[0]; };
        std::vector<double> at{2.0};
        auto g = forward_jacobian(f, at);
        CHECK(g[0] == doctest::Approx(4.0));
    }
    SUBCASE("product") {
        auto f = [](std::span<const Dual> x) { return x[0] * x[1]; };
        std::vector<double> at{2.0, 3.0};
        auto g = forward_jacobian(f, at);
        CHECK(g[0] == doctest::Approx(3.0));
        CHECK(g[1] == doctest::Approx(2.0));
    }
    SUBCASE("exp plus linear") {
        auto f = [](std::span<const Dual> x) { return exp(x[0]) + x[1]; };
        std::vector<double> at{0.0, 5.0};
        auto g = forward_jacobian(f, at);
        CHECK(g[0] == doctest::Approx(1.0));
        CHECK(g[1] == doctest::Approx(1.0));
    }
    SUBCASE("chunked passes match a single pass") {
        auto f = [](std::span<const Dual> x) {
            Dual acc(0.0);
            for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * x[i] * double(i + 1);
            for (std::size_t i = 1; i < x.size(); ++i) acc += x[i] * x[i - 1];
            return acc;
        };
        // 21 inputs forces two passes with max_directions == 16.
        std::vector<double> at(21);
        RngStream rng(5, 5);
        for (auto& v : at) v = rng.next_uniform() * 2.0 - 1.0;
        auto g = forward_jacobian(f, at);
        for (std::size_t i = 0; i < at.size(); ++i) {
            double expected = 2.0 * at[i] * double(i + 1);
            if (i > 0) expected += at[i - 1];
            if (i + 1 < at.size()) expected += at[i + 1];
            CHECK(g[i] == doctest::Approx(expected).epsilon(1e-12));
        }
    }
}

TEST_CASE("reverse and forward modes agree with each other and with FD") {
    RngStream rng(1234, 0);
    for (const auto& prog : kCorpus) {
        for (int rep = 0; rep < 20; ++rep) {
            std::vector<double> x(prog.arity);
            for (auto& v : x) v = 2.0 * rng.next_uniform() - 1.0;
            auto gr = reverse_gradient(prog, x);
            auto gf = forward_jacobian(prog.eval_dual, std::span<const double>(x));
            auto gd = fd_gradient(prog, x);
            for (int i = 0; i < prog.arity; ++i) {
                CHECK(rel_err(gr[i], gf[i]) <= 1e-10);
                CHECK(rel_err(gr[i], gd[i]) <= 1e-5);
                CHECK(rel_err(gf[i], gd[i]) <= 1e-5);
            }
        }
    }
}

TEST_CASE("tape growth is exactly linear in loop iterations") {
    auto record_loop = [](int iterations) {
        Tape tape;
        TracedValue x = make_leaf(tape, 0.7);
        TracedValue acc = make_leaf(tape, 0.0);
        for (int t = 0; t < iterations; ++t) {
            acc = acc + tanh(x * 1.01 + 0.1);  // fixed-size body
        }
        return tape.size();
    };
    const std::size_t base = record_loop(0);
    const std::size_t c = record_loop(1) - base;
    CHECK(c > 0);
    for (int t : {2, 5, 17, 100}) {
        CHECK(record_loop(t) == base + static_cast<std::size_t>(t) * c);
    }
}

TEST_CASE("forward mode allocates no tape nodes") {
    Tape tape;
    TracedValue live = make_leaf(tape, 1.0);
    (void)live;
    const std::size_t before = tape.size();
    auto f = [](std::span<const Dual> x) { return exp(x[0]) * x[1] + tanh(x[0]); };
    std::vector<double> at{0.4, -0.3};
    auto g = forward_jacobian(f, at);
    CHECK(g.size() == 2);
    CHECK(tape.size() == before);
}

TEST_CASE("Dual direction batches") {
    SUBCASE("mismatched direction counts throw") {
        Dual a(1.0, 3);
        Dual b(2.0, 4);
        CHECK_THROWS_AS(a + b, std::logic_error);
    }
    SUBCASE("constants broadcast") {
        Dual a = Dual::seeded(2.0, 3, 1);
        Dual c(5.0);
        Dual r = a * c + 1.0;
        CHECK(r.value() == doctest::Approx(11.0));
        CHECK(r.tangent(0) == doctest::Approx(0.0));
        CHECK(r.tangent(1) == doctest::Approx(5.0));
    }
    SUBCASE("detach zeroes the tangent") {
        Dual a = Dual::seeded(2.0, 2, 0);
        Dual y = a * detach(a);
        CHECK(y.value() == doctest::Approx(4.0));
        CHECK(y.tangent(0) == doctest::Approx(2.0));
    }
}

TEST_CASE("RngStream determinism and independence") {
    SUBCASE("identical (seed, stream) give bit-identical draws") {
        RngStream a(42, 7);
        RngStream b(42, 7);
        for (int i = 0; i < 1000; ++i) {
            CHECK(a.next_uniform() == b.next_uniform());
        }
        CHECK(a.normal_at(123) == b.normal_at(123));
        CHECK(a.gumbel_at(55) == b.gumbel_at(55));
    }
    SUBCASE("indexed access is order-independent") {
        RngStream s(9, 2);
        const double u5 = s.uniform_at(5);
        const double u0 = s.uniform_at(0);
        CHECK(s.uniform_at(5) == u5);
        CHECK(s.uniform_at(0) == u0);
    }
    SUBCASE("distinct stream ids decorrelate") {
        RngStream a(42, 0);
        RngStream b(42, 1);
        const int n = 20000;
        double mean_a = 0, mean_b = 0, cross = 0;
        for (int i = 0; i < n; ++i) {
            const double ua = a.uniform_at(i);
            const double ub = b.uniform_at(i);
            mean_a += ua;
            mean_b += ub;
            cross += (ua - 0.5) * (ub - 0.5);
        }
        mean_a /= n;
        mean_b /= n;
        cross /= n;
        CHECK(std::abs(mean_a - 0.5) < 0.01);
        CHECK(std::abs(mean_b - 0.5) < 0.01);
        CHECK(std::abs(cross / (1.0 / 12.0)) < 0.05);  // correlation of uniforms
    }
    SUBCASE("substreams with distinct tags differ") {
        RngStream base(3, 0);
        CHECK(base.substream(1).uniform_at(0) != base.substream(2).uniform_at(0));
    }
    SUBCASE("normal draws have sane moments") {
        RngStream s(11, 4);
        const int n = 50000;
        double m = 0, v = 0;
        for (int i = 0; i < n; ++i) {
            const double x = s.normal_at(i);
            m += x;
            v += x * x;
        }
        m /= n;
        v = v / n - m * m;
        CHECK(std::abs(m) < 0.02);
        CHECK(std::abs(v - 1.0) < 0.03);
    }
}

TEST_CASE("backward with multiple seeded outputs accumulates") {
    Tape tape;
    TracedValue x = make_leaf(tape, 2.0);
    TracedValue y1 = x * x;      // dy1/dx = 4
    TracedValue y2 = x * 3.0;    // dy2/dx = 3
    std::vector<std::pair<Tape::NodeId, double>> seeds{{y1.node, 1.0}, {y2.node, 2.0}};
    auto adj = tape.backward_seeded(seeds);
    CHECK(gradient_wrt(adj, x) == doctest::Approx(4.0 + 6.0));
}
