#pragma once

// Counter-based random streams. A stream is identified by a seed plus a tuple
// of stream coordinates (prompt, sample, step, replicate, ...); draws depend
// only on that key and the draw counter, never on scheduling.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string_view>

namespace nclens {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream) noexcept
        : key_(splitmix64(seed)) {
        for (std::uint64_t s : stream) key_ = splitmix64(key_ ^ splitmix64(s));
    }

    std::uint64_t next() noexcept {
        return splitmix64(key_ + 0xD1B54A32D192ED03ULL * ++counter_);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n); rejection keeps it unbiased.
    std::uint64_t below(std::uint64_t n) noexcept {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = next();
        while (x >= limit) x = next();
        return x % n;
    }

    // Standard normal via Box-Muller (portable, unlike std::normal_distribution).
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

} // namespace nclens
