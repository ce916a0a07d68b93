#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace petlab {

// splitmix64 step. Small state, full 64-bit output, identical on every
// platform we build for. All randomness in the library derives from this
// so that fixed seeds give bit-identical runs.
inline std::uint64_t splitmix64_next(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Derives an independent stream seed from (base, stream). Used to give
// e.g. every dataset example or every class its own generator without
// coupling draw counts across streams.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t s = base ^ (0x9E3779B97F4A7C15ull * (stream + 1));
    splitmix64_next(s);
    std::uint64_t t = s;
    return splitmix64_next(t);
}

// Deterministic RNG with explicitly implemented distributions.
// std::*_distribution is implementation-defined, so none of it is used here.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // decorrelate trivially related seeds (0, 1, 2, ...)
        splitmix64_next(state_);
    }

    std::uint64_t next_u64() { return splitmix64_next(state_); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Modulo bias is irrelevant at the sizes
    // used here and keeps the draw sequence trivially reproducible.
    std::size_t below(std::size_t n) {
        return static_cast<std::size_t>(next_u64() % static_cast<std::uint64_t>(n));
    }

    // Standard normal via Box-Muller (no cached spare, so the draw count
    // per call is fixed).
    double normal() {
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    // Normal(0, std) re-drawn until within +-2 std, as in ViT init.
    double trunc_normal(double stddev) {
        double z = 0.0;
        do {
            z = normal();
        } while (z < -2.0 || z > 2.0);
        return z * stddev;
    }

    // In-place Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
};

}  // namespace petlab
