#pragma once

#include <cmath>
#include <cstdint>

#include "sundial/error.hpp"

namespace sundial {

// Deterministic splittable PRNG. The core is splitmix64; split() derives an
// independent child stream from the parent state and a stream index without
// advancing the parent, so a set of draws can be made in any order (or in
// parallel) and still reproduce bit-for-bit.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(mix_seed(seed)) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53 bits of precision.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) {
        if (!(lo < hi)) throw ContractError("rng: uniform bounds must satisfy lo < hi");
        return lo + (hi - lo) * uniform();
    }

    // Inclusive integer range.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (lo > hi) throw ContractError("rng: uniform_int bounds must satisfy lo <= hi");
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        if (span == 0) return static_cast<std::int64_t>(next_u64());  // full 64-bit range
        return lo + static_cast<std::int64_t>(next_u64() % span);
    }

    // Standard normal via Box-Muller. No cached spare: every draw consumes a
    // fresh pair of uniforms, which keeps stream accounting trivial.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Child stream for draw index `stream`. Does not advance this generator.
    Rng split(std::uint64_t stream) const {
        std::uint64_t s = state_ ^ (0xD1342543DE82EF95ull * (stream + 1));
        return Rng(from_raw_tag{}, mix_seed(s));
    }

private:
    struct from_raw_tag {};
    Rng(from_raw_tag, std::uint64_t raw) : state_(raw) {}

    static std::uint64_t mix_seed(std::uint64_t seed) {
        std::uint64_t z = seed + 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
};

}  // namespace sundial
