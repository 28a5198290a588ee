#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace caga {

// Deterministic 64-bit generator (splitmix64). We roll our own so that
// streams are bit-identical across platforms and standard-library versions;
// std::shuffle and the std distributions make no such promise.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    // Uniform integer in [0, n). n must be positive.
    std::size_t next_below(std::size_t n) {
        return static_cast<std::size_t>(next_u64() % n);
    }

    // Standard normal via Box-Muller (std::normal_distribution is
    // implementation-defined, this is not).
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = next_double();
        double u2 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename V>
    void shuffle(std::vector<V>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = next_below(i + 1);
            std::swap(v[i], v[j]);
        }
    }

    // Derived per-sample stream (documented derivation: seed XOR index).
    static Rng for_sample(std::uint64_t seed, std::uint64_t index) {
        return Rng(seed ^ (index + 1));
    }

private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace caga
