#include "fptq/rng.hpp"

#include <cmath>

namespace fptq {

std::uint64_t Rng::uniform_index(std::uint64_t n) {
    // Rejection sampling to avoid modulo bias.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do {
        v = engine_();
    } while (v >= limit);
    return v % n;
}

double Rng::gaussian() {
    if (has_cached_) {
        has_cached_ = false;
        return cached_;
    }
    // Box-Muller; u1 is kept away from zero so log() stays finite.
    double u1;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
}

std::vector<double> Rng::gaussian_vector(std::size_t n, double stddev) {
    std::vector<double> out(n);
    for (auto& v : out) v = stddev * gaussian();
    return out;
}

Rng Rng::fork(std::uint64_t key) {
    const std::uint64_t a = engine_();
    // splitmix64 finalizer over (state draw, key) gives well-separated seeds.
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (key + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return Rng(z ^ (z >> 31));
}

}  // namespace fptq
