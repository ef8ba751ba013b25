#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

namespace diffabm {

/// Forward-mode scalar carrying up to `max_directions` tangent components.
/// Arithmetic propagates tangents in place and never allocates graph state.
/// A Dual with k == 0 is a broadcastable constant; all non-constant values
/// in one computation must share the same k.
class Dual {
  public:
    static constexpr std::uint32_t max_directions = 16;

    Dual() = default;
    Dual(double v) : value_(v) {}  // NOLINT: implicit constant lift

    Dual(double v, std::uint32_t k) : value_(v), k_(k) {
        check_k(k);
        tangent_.fill(0.0);
    }

    /// Value v with tangent e_dir in a k-direction batch.
    static Dual seeded(double v, std::uint32_t k, std::uint32_t dir) {
        Dual d(v, k);
        if (dir >= k) throw std::out_of_range("Dual::seeded: direction out of range");
        d.tangent_[dir] = 1.0;
        return d;
    }

    double value() const noexcept { return value_; }
    std::uint32_t directions() const noexcept { return k_; }
    double tangent(std::uint32_t i) const { return i < k_ ? tangent_[i] : 0.0; }
    void set_tangent(std::uint32_t i, double t) {
        if (i >= k_) throw std::out_of_range("Dual::set_tangent");
        tangent_[i] = t;
    }

    friend Dual combine(const Dual& a, const Dual& b, double value, double da, double db) {
        Dual r;
        r.value_ = value;
        r.k_ = merged_k(a, b);
        if (a.k_ != 0 && b.k_ != 0) {
            for (std::uint32_t i = 0; i < r.k_; ++i)
                r.tangent_[i] = da * a.tangent_[i] + db * b.tangent_[i];
        } else if (a.k_ != 0) {
            for (std::uint32_t i = 0; i < r.k_; ++i) r.tangent_[i] = da * a.tangent_[i];
        } else if (b.k_ != 0) {
            for (std::uint32_t i = 0; i < r.k_; ++i) r.tangent_[i] = db * b.tangent_[i];
        }
        return r;
    }

    friend Dual combine1(const Dual& a, double value, double da) {
        Dual r;
        r.value_ = value;
        r.k_ = a.k_;
        for (std::uint32_t i = 0; i < r.k_; ++i) r.tangent_[i] = da * a.tangent_[i];
        return r;
    }

  private:
    static void check_k(std::uint32_t k) {
        if (k > max_directions) {
            throw std::invalid_argument("Dual: direction count exceeds max_directions");
        }
    }

    static std::uint32_t merged_k(const Dual& a, const Dual& b) {
        if (a.k_ != 0 && b.k_ != 0 && a.k_ != b.k_) {
            throw std::logic_error("Dual: mixing values with different direction counts");
        }
        return a.k_ != 0 ? a.k_ : b.k_;
    }

    double value_ = 0.0;
    std::uint32_t k_ = 0;
    std::array<double, max_directions> tangent_;  // entries >= k_ are never read
};

inline double value_of(const Dual& a) noexcept { return a.value(); }

/// Stop-gradient: value passes through, tangents are dropped.
inline Dual detach(const Dual& a) { return Dual(a.value()); }

inline Dual operator+(const Dual& a, const Dual& b) {
    return combine(a, b, a.value() + b.value(), 1.0, 1.0);
}
inline Dual operator-(const Dual& a, const Dual& b) {
    return combine(a, b, a.value() - b.value(), 1.0, -1.0);
}
inline Dual operator*(const Dual& a, const Dual& b) {
    return combine(a, b, a.value() * b.value(), b.value(), a.value());
}
inline Dual operator/(const Dual& a, const Dual& b) {
    if (b.value() == 0.0) throw std::domain_error("Dual: division by zero");
    const double inv = 1.0 / b.value();
    // Value computed as a/b (not a * inv) so all scalar kinds produce
    // bit-identical forward values.
    return combine(a, b, a.value() / b.value(), inv, -a.value() * inv * inv);
}
inline Dual operator-(const Dual& a) { return combine1(a, -a.value(), -1.0); }
inline Dual operator+(const Dual& a) { return a; }

inline Dual operator+(const Dual& a, double b) { return combine1(a, a.value() + b, 1.0); }
inline Dual operator+(double a, const Dual& b) { return combine1(b, a + b.value(), 1.0); }
inline Dual operator-(const Dual& a, double b) { return combine1(a, a.value() - b, 1.0); }
inline Dual operator-(double a, const Dual& b) { return combine1(b, a - b.value(), -1.0); }
inline Dual operator*(const Dual& a, double b) { return combine1(a, a.value() * b, b); }
inline Dual operator*(double a, const Dual& b) { return combine1(b, a * b.value(), a); }
inline Dual operator/(const Dual& a, double b) {
    if (b == 0.0) throw std::domain_error("Dual: division by zero");
    return combine1(a, a.value() / b, 1.0 / b);
}
inline Dual operator/(double a, const Dual& b) { return Dual(a) / b; }

inline Dual& operator+=(Dual& a, const Dual& b) { return a = a + b; }
inline Dual& operator-=(Dual& a, const Dual& b) { return a = a - b; }
inline Dual& operator*=(Dual& a, const Dual& b) { return a = a * b; }
inline Dual& operator/=(Dual& a, const Dual& b) { return a = a / b; }

inline Dual exp(const Dual& a) {
    const double e = std::exp(a.value());
    return combine1(a, e, e);
}
inline Dual log(const Dual& a) {
    if (a.value() <= 0.0) throw std::domain_error("Dual: log of non-positive value");
    return combine1(a, std::log(a.value()), 1.0 / a.value());
}
inline Dual sqrt(const Dual& a) {
    if (a.value() <= 0.0) throw std::domain_error("Dual: sqrt of non-positive value");
    const double s = std::sqrt(a.value());
    return combine1(a, s, 0.5 / s);
}
inline Dual tanh(const Dual& a) {
    const double t = std::tanh(a.value());
    return combine1(a, t, 1.0 - t * t);
}
inline Dual pow(const Dual& a, const Dual& b) {
    if (a.value() <= 0.0 && b.directions() != 0) {
        throw std::domain_error("Dual: pow base must be positive");
    }
    const double v = std::pow(a.value(), b.value());
    const double da = b.value() * std::pow(a.value(), b.value() - 1.0);
    const double db = b.directions() != 0 ? v * std::log(a.value()) : 0.0;
    return combine(a, b, v, da, db);
}
inline Dual pow(const Dual& a, double b) { return pow(a, Dual(b)); }

inline bool operator<(const Dual& a, const Dual& b) { return a.value() < b.value(); }
inline bool operator>(const Dual& a, const Dual& b) { return a.value() > b.value(); }
inline bool operator<=(const Dual& a, const Dual& b) { return a.value() <= b.value(); }
inline bool operator>=(const Dual& a, const Dual& b) { return a.value() >= b.value(); }

/// Gradient of a scalar-output program in one forward pass: input i carries
/// tangent direction e_i. Inputs beyond `max_directions` are handled by
/// chunked passes seeded with partial identities; the results are identical.
template <class Program>
std::vector<double> forward_jacobian(Program&& program, std::span<const double> inputs) {
    const std::size_t d = inputs.size();
    std::vector<double> grad(d, 0.0);
    std::vector<Dual> args(d);
    for (std::size_t start = 0; start < d || (d == 0 && start == 0);
         start += Dual::max_directions) {
        const std::uint32_t k = static_cast<std::uint32_t>(
            std::min<std::size_t>(Dual::max_directions, d - start));
        for (std::size_t i = 0; i < d; ++i) {
            if (i >= start && i < start + k) {
                args[i] = Dual::seeded(inputs[i], k, static_cast<std::uint32_t>(i - start));
            } else {
                args[i] = Dual(inputs[i]);
            }
        }
        const Dual out = program(std::span<const Dual>(args));
        for (std::uint32_t j = 0; j < k; ++j) grad[start + j] = out.tangent(j);
        if (d == 0) break;
    }
    return grad;
}

}  // namespace diffabm
