#pragma once

#include <cmath>
#include <cstdint>

namespace bgn {

// Counter-based RNG: every draw is a pure function of (seed, stream, counter),
// so independent streams are reproducible regardless of evaluation order.
// Mixing is SplitMix64 over the keyed counter.
class RngStream {
public:
    RngStream() = default;
    RngStream(std::uint64_t seed, std::uint64_t stream)
        : seed_(seed), stream_(stream) {}

    std::uint64_t next_u64() {
        std::uint64_t z = seed_ + 0x9E3779B97F4A7C15ULL * (counter_++ + 1);
        z ^= stream_ * 0xBF58476D1CE4E5B9ULL + 0x94D049BB133111EBULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in the open interval (0,1); never returns 0 or 1.
    double uniform01() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Box-Muller; two uniforms per draw keeps the stream counter-pure.
    double normal() {
        const double u1 = uniform01();
        const double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Standard Gumbel(0,1) draw: -log(-log U).
    double gumbel() { return -std::log(-std::log(uniform01())); }

    // Derive an independent substream; the child shares the seed but mixes the
    // stream id so that (fork(a), fork(b)) never collide for a != b.
    RngStream fork(std::uint64_t substream) const {
        std::uint64_t s = stream_ ^ (0xD1B54A32D192ED03ULL * (substream + 1));
        s = (s ^ (s >> 29)) * 0xFF51AFD7ED558CCDULL;
        return RngStream(seed_, s ^ (s >> 32));
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

private:
    std::uint64_t seed_ = 0;
    std::uint64_t stream_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace bgn
