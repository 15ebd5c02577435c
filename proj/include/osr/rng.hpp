#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace osr {

/// Deterministic random stream. All draws are derived from raw 64-bit engine
/// output with fixed mappings, so a seed pins the exact sequence of uniforms,
/// normals and shuffles independent of standard-library distribution details.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : base_seed_(seed), engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        // rejection sampling to avoid modulo bias
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    /// Standard normal via Box-Muller; caches the paired draw.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    /// Fisher-Yates shuffle with this stream (std::shuffle's draw order is
    /// implementation-defined; this one is pinned).
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::uint64_t base_seed() const { return base_seed_; }

private:
    std::uint64_t base_seed_;
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

/// splitmix64 finalizer; used to derive independent child seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Derive a child seed from a base seed and a stream label, e.g. one child
/// per pipeline stage or per resampled test set.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view label) {
    std::uint64_t h = base;
    for (char c : label) h = mix_seed(h ^ static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
    return mix_seed(h);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    return mix_seed(base ^ mix_seed(index + 1));
}

}  // namespace osr
