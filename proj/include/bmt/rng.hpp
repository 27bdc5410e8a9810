#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace bmt {

// Self-contained xoshiro256** generator. The standard <random> distributions are
// implementation-defined, so we roll the few draws we need to keep outputs
// byte-identical across compilers.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        // splitmix64 expansion of the seed into the xoshiro state
        uint64_t x = seed;
        for (auto& s : state_) {
            x += 0x9e3779b97f4a7c15ull;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
            s = z ^ (z >> 31);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller with a cached spare.
    double gauss(double mean = 0.0, double stddev = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + stddev * spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return mean + stddev * r * std::cos(theta);
    }

    // Unbiased integer in [0, n).
    size_t uniform_index(size_t n) {
        if (n <= 1) return 0;
        const uint64_t bound = n;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return static_cast<size_t>(v % bound);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = uniform_index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derived generator for an independent stream.
    Rng fork(uint64_t stream) { return Rng(next_u64() ^ (stream * 0x9e3779b97f4a7c15ull)); }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t state_[4] = {};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace bmt
