#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace feddp {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Seeded random stream with fixed value transforms.
///
/// The engine is std::mt19937_64 (a portable bit stream), but every
/// distribution transform is implemented here rather than delegated to
/// std::*_distribution, whose output is implementation-defined. The exact
/// algorithms are part of the reproducibility contract:
///   - uniform():  (next_u64() >> 11) * 2^-53, in [0, 1)
///   - below(n):   rejection sampling on the top of the 64-bit range
///   - normal():   Box-Muller, one value per call, pair not cached
///   - gamma(a):   Marsaglia-Tsang squeeze; for a < 1 boosted via
///                 gamma(a + 1) * u^(1/a) with u drawn strictly positive
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : engine_(seed) {}

    /// Named substream: independent stream derived from (seed, tag, a, b).
    static RngStream derive(std::uint64_t seed, std::string_view tag,
                            std::uint64_t a = 0, std::uint64_t b = 0) {
        std::uint64_t s = seed;
        std::uint64_t h = splitmix64(s);
        s ^= fnv1a64(tag);
        h ^= splitmix64(s);
        s ^= a * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL;
        h ^= splitmix64(s);
        s ^= b * 0xd1342543de82ef95ULL + 1;
        h ^= splitmix64(s);
        return RngStream(h);
    }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n), unbiased.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller. Consumes two uniforms per value.
    double normal() {
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    /// Gamma(alpha, 1), alpha > 0.
    double gamma(double alpha) {
        if (alpha < 1.0) {
            double u;
            do {
                u = uniform();
            } while (u <= 0.0);
            return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
        }
        const double d = alpha - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform();
            if (u < 1.0 - 0.0331 * (x * x) * (x * x)) return d * v;
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    /// In-place Fisher-Yates shuffle (descending index walk).
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

} // namespace feddp
