#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace diffabm {

namespace detail {

// SplitMix64 finalizer: full-avalanche 64-bit mix.
inline constexpr std::uint64_t avalanche64(std::uint64_t z) noexcept {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
}

inline constexpr std::uint64_t golden = 0x9E3779B97F4A7C15ull;

}  // namespace detail

/// Counter-based pseudo-random stream keyed by (seed, stream-id). Every
/// output is a pure function of (seed, stream-id, draw index), so draws can
/// be taken in any order or in parallel with identical results. Advancing
/// the counter is a constant-time jump.
class RngStream {
  public:
    RngStream() = default;
    RngStream(std::uint64_t seed, std::uint64_t stream_id = 0)
        : seed_(seed), stream_(stream_id) {
        key_ = detail::avalanche64(detail::avalanche64(seed_ + detail::golden) ^
                                   (stream_ * 0xD2B74407B1CE6E93ull + 0x632BE59BD9B4E019ull));
    }

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream_id() const noexcept { return stream_; }

    /// Independent stream derived from this one; distinct tags give
    /// statistically independent sequences.
    RngStream substream(std::uint64_t tag) const {
        return RngStream(seed_, detail::avalanche64(stream_ ^ (tag + 1) * detail::golden));
    }

    std::uint64_t bits_at(std::uint64_t index) const noexcept {
        return detail::avalanche64(key_ + (index + 1) * detail::golden);
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform_at(std::uint64_t index) const noexcept {
        return static_cast<double>(bits_at(index) >> 11) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller; draw i consumes uniform indices 2i, 2i+1.
    double normal_at(std::uint64_t index) const noexcept {
        const double u1 = std::max(uniform_at(2 * index), 0x1.0p-53);
        const double u2 = uniform_at(2 * index + 1);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Gumbel(0,1) via -log(-log(u)), with u clamped to [1e-12, 1-1e-12]
    /// before the double logarithm so the output is always finite.
    double gumbel_at(std::uint64_t index) const noexcept {
        const double u = std::clamp(uniform_at(index), 1e-12, 1.0 - 1e-12);
        return -std::log(-std::log(u));
    }

    // Sequential convenience over the same counter space.
    double next_uniform() noexcept { return uniform_at(counter_++); }
    double next_gumbel() noexcept { return gumbel_at(counter_++); }
    double next_normal() noexcept {
        const double n = normal_from_uniform_pair(counter_);
        counter_ += 2;
        return n;
    }

    void jump(std::uint64_t n) noexcept { counter_ += n; }
    std::uint64_t counter() const noexcept { return counter_; }

  private:
    double normal_from_uniform_pair(std::uint64_t base) const noexcept {
        const double u1 = std::max(uniform_at(base), 0x1.0p-53);
        const double u2 = uniform_at(base + 1);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t seed_ = 0;
    std::uint64_t stream_ = 0;
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace diffabm
