#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace fptq {

// Seedable random source used by the whole project. Every draw goes through
// this class; nothing samples from an implicit global state.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the
// standard. Uniform and Gaussian variates are derived here by explicit
// formulas (53-bit mantissa scaling and Box-Muller) instead of the
// std::*_distribution classes, whose algorithms are implementation-defined.
// A given seed therefore produces bit-identical streams on any conforming
// platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform on [0, 1) with 53 random mantissa bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be positive.
    std::uint64_t uniform_index(std::uint64_t n);

    // Standard normal via Box-Muller; caches the second variate.
    double gaussian();

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    std::vector<double> gaussian_vector(std::size_t n, double stddev = 1.0);

    // Derive an independent stream; mixes the key into the current state.
    Rng fork(std::uint64_t key);

private:
    std::mt19937_64 engine_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace fptq
