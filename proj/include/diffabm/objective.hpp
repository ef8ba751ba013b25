#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <vector>

#include "diffabm/scalar_ops.hpp"

namespace diffabm {

/// Gaussian kernel k(u, v) = exp(-(u - v)^2 / (2 sigma^2)); k(u, u) = 1.
struct GaussianKernel {
    double bandwidth = 1.0;

    explicit GaussianKernel(double sigma) : bandwidth(sigma) {
        if (!(sigma > 0.0)) throw std::invalid_argument("GaussianKernel: bandwidth must be > 0");
    }

    template <class A, class B>
    auto operator()(const A& u, const B& v) const {
        auto diff = u - v;
        return exp(diff * diff * (-0.5 / (bandwidth * bandwidth)));
    }
};

/// Median of pairwise absolute differences |y_i - y_j|, i < j; the default
/// kernel bandwidth, computed once from the observed series. Falls back to
/// 1.0 with a warning when all values coincide.
inline double median_heuristic(std::span<const double> y) {
    if (y.size() < 2) throw std::invalid_argument("median_heuristic: need at least 2 values");
    std::vector<double> gaps;
    gaps.reserve(y.size() * (y.size() - 1) / 2);
    for (std::size_t i = 0; i < y.size(); ++i) {
        for (std::size_t j = i + 1; j < y.size(); ++j) {
            gaps.push_back(std::abs(y[i] - y[j]));
        }
    }
    if (*std::max_element(gaps.begin(), gaps.end()) == 0.0) {
        std::fprintf(stderr,
                     "median_heuristic: all values identical; falling back to bandwidth 1.0\n");
        return 1.0;
    }
    const std::size_t n = gaps.size();
    std::nth_element(gaps.begin(), gaps.begin() + n / 2, gaps.end());
    double med = gaps[n / 2];
    if (n % 2 == 0) {
        std::nth_element(gaps.begin(), gaps.begin() + n / 2 - 1, gaps.begin() + n / 2);
        med = 0.5 * (med + gaps[n / 2 - 1]);
    }
    return med;
}

/// Squared maximum mean discrepancy between a simulated series x and an
/// observed series y:
///   1/(Tx(Tx-1)) sum_{t != t'} k(x_t, x_t')
/// + 1/(Ty(Ty-1)) sum_{t != t'} k(y_t, y_t')
/// - 2/(Tx Ty)    sum_{t, t'}   k(x_t, y_t').
/// The within-series terms are unbiased (off-diagonal only), so the result
/// may be slightly negative. Differentiable in x when x is traced.
/// `yy_term`, when non-negative, supplies the precomputed constant
/// within-y sum to avoid recomputing it every evaluation.
template <class Scalar>
Scalar mmd2(std::span<const Scalar> x, std::span<const double> y, const GaussianKernel& kernel,
            double yy_term = -1.0) {
    const std::size_t tx = x.size();
    const std::size_t ty = y.size();
    if (tx < 2 || ty < 2) throw std::invalid_argument("mmd2: series must have length >= 2");

    Scalar xx(0.0);
    for (std::size_t t = 0; t < tx; ++t) {
        for (std::size_t u = t + 1; u < tx; ++u) {
            xx += kernel(x[t], x[u]);
        }
    }
    xx = xx * (2.0 / (double(tx) * double(tx - 1)));

    if (yy_term < 0.0) {
        double yy = 0.0;
        for (std::size_t t = 0; t < ty; ++t) {
            for (std::size_t u = t + 1; u < ty; ++u) {
                yy += kernel(y[t], y[u]);
            }
        }
        yy_term = yy * (2.0 / (double(ty) * double(ty - 1)));
    }

    Scalar xy(0.0);
    for (std::size_t t = 0; t < tx; ++t) {
        for (std::size_t u = 0; u < ty; ++u) {
            xy += kernel(x[t], y[u]);
        }
    }
    return xx + yy_term - xy * (2.0 / (double(tx) * double(ty)));
}

/// Constant within-y part of mmd2 for a fixed observed series.
inline double mmd2_within_term(std::span<const double> y, const GaussianKernel& kernel) {
    if (y.size() < 2) throw std::invalid_argument("mmd2_within_term: series length >= 2");
    double yy = 0.0;
    for (std::size_t t = 0; t < y.size(); ++t) {
        for (std::size_t u = t + 1; u < y.size(); ++u) {
            yy += kernel(y[t], y[u]);
        }
    }
    return yy * (2.0 / (double(y.size()) * double(y.size() - 1)));
}

/// Sum of squared log10 distances with a +delta stabiliser so
/// zero-count days stay finite:
///   sum_t (log10(x_t + delta) - log10(y_t + delta))^2.
/// Differentiable in x.
template <class Scalar>
Scalar log10_sse(std::span<const Scalar> x, std::span<const double> y, double delta = 1.0) {
    if (x.size() != y.size()) throw std::invalid_argument("log10_sse: length mismatch");
    Scalar total(0.0);
    for (std::size_t t = 0; t < x.size(); ++t) {
        if (value_of(x[t]) < 0.0 || y[t] < 0.0) {
            throw std::domain_error("log10_sse: negative entry");
        }
        // Same log10 formula on both sides so x == y gives exactly 0.
        Scalar diff = log10(x[t] + delta) - log10(y[t] + delta);
        total += diff * diff;
    }
    return total;
}

}  // namespace diffabm
