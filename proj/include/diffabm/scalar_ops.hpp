#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "diffabm/dual.hpp"
#include "diffabm/rng.hpp"
#include "diffabm/tape.hpp"

namespace diffabm {

inline double value_of(double a) noexcept { return a; }
inline double detach(double a) noexcept { return a; }

// Plain-double overloads so scalar-generic code resolves unqualified calls
// for all three scalar kinds.
inline double exp(double a) { return std::exp(a); }
inline double log(double a) {
    if (a <= 0.0) throw std::domain_error("log of non-positive value");
    return std::log(a);
}
inline double sqrt(double a) {
    if (a <= 0.0) throw std::domain_error("sqrt of non-positive value");
    return std::sqrt(a);
}
inline double tanh(double a) { return std::tanh(a); }
inline double pow(double a, double b) { return std::pow(a, b); }

/// True for a plain constant that is exactly zero (no gradient path and no
/// contribution); used to skip no-op accumulations in the simulators.
inline bool is_zero_constant(double a) noexcept { return a == 0.0; }
inline bool is_zero_constant(const TracedValue& a) noexcept {
    return !a.attached() && a.value == 0.0;
}
inline bool is_zero_constant(const Dual& a) noexcept {
    return a.directions() == 0 && a.value() == 0.0;
}

/// min by value; the selected operand keeps its gradient path.
template <class Scalar>
Scalar min_by_value(const Scalar& a, const Scalar& b) {
    return value_of(a) <= value_of(b) ? a : b;
}

template <class Scalar>
Scalar max_by_value(const Scalar& a, const Scalar& b) {
    return value_of(a) >= value_of(b) ? a : b;
}

/// softmax(beta * logits) with the max subtracted before exponentiation, so
/// no overflow occurs for |beta * logit| up to ~700 and outputs sum to 1.
template <class Scalar>
std::vector<Scalar> stable_softmax(std::span<const Scalar> logits, double beta) {
    if (logits.empty()) throw std::invalid_argument("stable_softmax: empty input");
    if (!std::isfinite(beta)) throw std::invalid_argument("stable_softmax: non-finite scale");
    double shift = -std::numeric_limits<double>::infinity();
    for (const Scalar& u : logits) {
        const double v = value_of(u);
        if (!std::isfinite(v)) throw std::domain_error("stable_softmax: non-finite logit");
        shift = std::max(shift, beta * v);
    }
    std::vector<Scalar> out;
    out.reserve(logits.size());
    Scalar total(0.0);
    for (const Scalar& u : logits) {
        Scalar e = (beta == 1.0) ? exp(u - shift) : exp(u * beta - shift);
        total += e;
        out.push_back(std::move(e));
    }
    for (Scalar& e : out) e = e / total;
    return out;
}

template <class Scalar>
std::vector<Scalar> stable_softmax(const std::vector<Scalar>& logits, double beta) {
    return stable_softmax(std::span<const Scalar>(logits), beta);
}

/// Deterministic part of the Gumbel-Softmax draw: softmax((logit + g) /
/// temperature) for given noise realisations g. Differentiable in the
/// logits with the noise held fixed; the output lies on the simplex.
template <class Scalar>
std::vector<Scalar> gumbel_softmax_with_noise(std::span<const Scalar> logits,
                                              double temperature,
                                              std::span<const double> noise) {
    if (!(temperature > 0.0)) {
        throw std::invalid_argument("gumbel_softmax: temperature must be > 0");
    }
    if (noise.size() != logits.size()) {
        throw std::invalid_argument("gumbel_softmax: noise/logit length mismatch");
    }
    std::vector<Scalar> perturbed;
    perturbed.reserve(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        perturbed.push_back((logits[i] + noise[i]) / temperature);
    }
    return stable_softmax(std::span<const Scalar>(perturbed), 1.0);
}

/// Gumbel-Softmax sample with iid Gumbel(0,1) noise drawn from `rng`.
template <class Scalar>
std::vector<Scalar> sample_gumbel_softmax(std::span<const Scalar> logits, double temperature,
                                          RngStream& rng) {
    if (!(temperature > 0.0)) {
        throw std::invalid_argument("sample_gumbel_softmax: temperature must be > 0");
    }
    std::vector<double> noise(logits.size());
    for (double& g : noise) g = rng.next_gumbel();
    return gumbel_softmax_with_noise(logits, temperature, std::span<const double>(noise));
}

template <class Scalar>
std::vector<Scalar> sample_gumbel_softmax(const std::vector<Scalar>& logits, double temperature,
                                          RngStream& rng) {
    return sample_gumbel_softmax(std::span<const Scalar>(logits), temperature, rng);
}

/// Two-category Gumbel-Softmax draw returning the first component; the
/// allocation-free form of gumbel_softmax_with_noise used in inner loops.
template <class Scalar>
Scalar gumbel_softmax_binary(const Scalar& logit_a, const Scalar& logit_b, double temperature,
                             double noise_a, double noise_b) {
    if (!(temperature > 0.0)) {
        throw std::invalid_argument("gumbel_softmax: temperature must be > 0");
    }
    Scalar ya = (logit_a + noise_a) / temperature;
    Scalar yb = (logit_b + noise_b) / temperature;
    const double shift = std::max(value_of(ya), value_of(yb));
    Scalar ea = exp(ya - shift);
    Scalar eb = exp(yb - shift);
    return ea / (ea + eb);
}

/// Straight-through estimator: the hard 0/1 sample forward, the relaxed
/// sample's gradient backward.
template <class Scalar>
Scalar straight_through(const Scalar& soft) {
    const double hard = value_of(soft) >= 0.5 ? 1.0 : 0.0;
    return hard + (soft - detach(soft));
}

/// log(1 + e^x), stable on both tails.
template <class Scalar>
Scalar softplus(const Scalar& x) {
    if (value_of(x) > 30.0) return x + log(1.0 + exp(-x));
    return log(1.0 + exp(x));
}

/// 1 / (1 + e^-x), stable on both tails.
template <class Scalar>
Scalar sigmoid(const Scalar& x) {
    if (value_of(x) < -30.0) {
        Scalar e = exp(x);
        return e / (1.0 + e);
    }
    return 1.0 / (1.0 + exp(-x));
}

template <class Scalar>
Scalar log10(const Scalar& x) {
    return log(x) * (1.0 / std::numbers::ln10);
}

}  // namespace diffabm
