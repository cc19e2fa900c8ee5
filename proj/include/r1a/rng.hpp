#pragma once

#include <cstdint>
#include <limits>
#include <random>

namespace r1a {

/// Deterministic random source for seeded experiments.
///
/// Engine: std::mt19937_64, whose output sequence is fixed by the C++
/// standard, so results reproduce bit-for-bit across platforms. The
/// distribution adapters are hand-rolled for the same reason —
/// std::normal_distribution and std::uniform_int_distribution are
/// implementation-defined:
///   * uniform()  takes the top 53 engine bits,
///   * normal()   is the polar-free Box-Muller transform with a cached spare,
///   * below(n)   is unbiased rejection sampling on the raw 64-bit stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller; u1 is shifted into (0, 1] so log never
    /// sees zero.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    /// Uniform integer in {0, ..., n-1}, unbiased.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t rem =
            (std::numeric_limits<std::uint64_t>::max() % n + 1) % n;
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - rem;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x > limit);
        return x % n;
    }

    std::uint64_t raw() { return engine_(); }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace r1a
