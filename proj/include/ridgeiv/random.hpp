#pragma once

#include "ridgeiv/linalg.hpp"

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>

namespace ridgeiv {

/// SplitMix64 finalizer, used both as a hash and as the engine step.
inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Order-dependent hash of a list of 64-bit keys.
inline constexpr std::uint64_t hash_keys(std::initializer_list<std::uint64_t> keys) noexcept {
    std::uint64_t h = 0x6a09e667f3bcc909ULL;
    for (auto k : keys) h = splitmix64(h ^ splitmix64(k));
    return h;
}

/// Small counter-style engine. Each stream is keyed by (seed, counter), so a
/// draw depends only on its key and never on scheduling order.
class CounterEngine {
public:
    using result_type = std::uint64_t;

    CounterEngine(std::uint64_t seed, std::uint64_t counter) noexcept
        : state_(hash_keys({seed, counter})) {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    result_type operator()() noexcept {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t state_;
};

/// Fills `out` with iid standard normal draws from the (seed, counter) stream.
inline void standard_normals(std::uint64_t seed, std::uint64_t counter, Eigen::Ref<Vector> out) {
    CounterEngine eng(seed, counter);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Index i = 0; i < out.size(); ++i) out[i] = normal(eng);
}

}  // namespace ridgeiv
