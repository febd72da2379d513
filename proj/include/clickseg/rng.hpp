#ifndef CLICKSEG_RNG_HPP
#define CLICKSEG_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>

namespace clickseg {

/// Seeded random source with platform-independent output.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard. The std distributions are implementation-defined, so every
/// conversion to doubles and ranges is done here:
///   - uniform():      top 53 bits of one engine draw, times 2^-53, in [0, 1)
///   - uniform_index:  rejection sampling on the low bits (no modulo bias)
///   - fork(stream):   child seed = splitmix64(seed ^ splitmix64(stream))
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return engine_(); }

    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t uniform_index(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = engine_();
        while (x >= limit) x = engine_();
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Independent child stream; the parent is not advanced.
    Rng fork(std::uint64_t stream) const { return Rng(splitmix64(seed_ ^ splitmix64(stream))); }

    static std::uint64_t splitmix64(std::uint64_t x) {
        x += 0x9E3779B97F4A7C15ULL;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        return x ^ (x >> 31);
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

} // namespace clickseg

#endif // CLICKSEG_RNG_HPP
