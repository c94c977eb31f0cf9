#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace cnerf {

/// Seedable random source passed explicitly to every stochastic routine.
/// Normal draws use Box-Muller without caching so the engine state alone
/// determines the future stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    bool coin() { return (engine_() >> 63) != 0; }

    std::vector<double> normal_vector(std::size_t n);
    std::vector<double> uniform_vector(std::size_t n, double lo, double hi);

    /// Derives an independent generator.
    Rng fork() { return Rng(engine_()); }

    std::string serialize() const;
    static Rng deserialize(const std::string& state);

    bool operator==(const Rng& other) const { return engine_ == other.engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace cnerf
