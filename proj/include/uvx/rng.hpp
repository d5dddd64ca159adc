#pragma once

#include <cstdint>
#include <limits>

namespace uvx {

/// Counter-based SplitMix64 generator.
///
/// Output i is `mix(key + (i + 1) * golden)`, where `key` is derived from a
/// (seed, stream) pair, so any draw can be reproduced from its coordinates
/// without replaying the sequence. Streams let independent consumers (weight
/// init, augmentation of case j at iteration t, shuffling) share one seed.
/// Satisfies UniformRandomBitGenerator for use with <random> distributions.
class CounterRng {
public:
    using result_type = std::uint64_t;

    static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

    explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
        : key_(mix(seed ^ mix(stream + kGolden))) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() { return mix(key_ + (++counter_) * kGolden); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    std::uint64_t counter() const { return counter_; }

    /// Derives an independent child stream key, e.g. for (iteration, case).
    CounterRng fork(std::uint64_t stream) const { return CounterRng(key_, stream); }

    static constexpr std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

} // namespace uvx
