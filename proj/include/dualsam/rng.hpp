#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

// Deterministic random helpers. Distributions are implemented by hand on top
// of mt19937_64 so streams are bit-identical across standard libraries.

namespace dualsam {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    // Uniform in [0,1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo + 1);
        return lo + static_cast<std::int64_t>(engine_() % span);
    }

    // Box-Muller; one value per call, no caching, for reproducibility.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * mag * std::cos(6.283185307179586477 * u2);
    }

private:
    std::mt19937_64 engine_;
};

inline std::uint64_t fnv1a(const std::string& text) {
    std::uint64_t hash = 1469598103934665603ull;
    for (unsigned char c : text) {
        hash ^= c;
        hash *= 1099511628211ull;
    }
    return hash;
}

// Per-name stream so a parameter's initialization does not depend on the
// order in which other parameters are created.
inline Rng named_rng(std::uint64_t seed, const std::string& name) {
    return Rng(seed ^ fnv1a(name));
}

}  // namespace dualsam
