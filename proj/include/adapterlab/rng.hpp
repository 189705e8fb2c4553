#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace adapterlab {

// Deterministic PRNG with self-contained sampling primitives so results do
// not depend on the standard library's distribution implementations.
// All randomness in a run flows from one global seed through named streams:
// rng = Rng(derive_seed(global_seed, "init")), etc.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed == 0 ? 0x9e3779b97f4a7c15ull : seed) {
        // warm up: splitmix64 decorrelates small consecutive seeds
        for (int i = 0; i < 4; ++i) next_u64();
    }

    uint64_t next_u64() {
        // splitmix64
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, n). Rejection-free multiply-shift is fine at our scales.
    uint64_t uniform_u64(uint64_t n) {
        return static_cast<uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    int uniform_int(int lo, int hi_exclusive) {
        return lo + static_cast<int>(uniform_u64(static_cast<uint64_t>(hi_exclusive - lo)));
    }

    // Uniform in [0, 1) with 53 bits.
    double uniform_real() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Box-Muller with a cached spare.
    double normal(double mean, double stddev) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + spare_ * stddev;
        }
        double u1 = 1.0 - uniform_real();  // avoid log(0)
        double u2 = uniform_real();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return mean + r * std::cos(theta) * stddev;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = uniform_u64(i);
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a over the label, mixed into the base seed. Stable across platforms.
inline uint64_t derive_seed(uint64_t base, std::string_view label) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : label) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h ^ (base * 0x9e3779b97f4a7c15ull);
}

}  // namespace adapterlab
