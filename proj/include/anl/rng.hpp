#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace anl {

/// SplitMix64 finalizer. Used to derive independent stream seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Seed for a named sub-stream: splitmix64(seed ^ fnv1a64(tag) ^ splitmix64(index)).
constexpr std::uint64_t stream_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
    return splitmix64(seed ^ fnv1a64(tag) ^ splitmix64(index));
}

/// Portable generator: std::mt19937_64 (output fixed by the standard) with
/// hand-written distributions, since std:: distributions differ across
/// standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    Rng(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0)
        : engine_(stream_seed(seed, tag, index)) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n), rejection-sampled.
    std::uint64_t below(std::uint64_t n);

    /// Standard normal by Box-Muller; the second variate is cached.
    double normal();

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::vector<std::size_t> permutation(std::size_t n);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace anl
