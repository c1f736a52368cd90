#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace calpa {

// Counter-based deterministic randomness: every draw is a pure function of
// (seed, stream tag, counter), so results never depend on call interleaving,
// thread count, or checkpoint save/resume boundaries.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

class Rng {
  public:
    Rng(std::uint64_t seed, std::uint64_t tag) : state_(splitmix64(seed ^ splitmix64(tag))) {}
    Rng(std::uint64_t seed, const std::string& tag) : Rng(seed, fnv1a64(tag)) {}

    std::uint64_t bits(std::uint64_t counter) const { return splitmix64(state_ ^ splitmix64(counter)); }

    std::uint64_t next() { return bits(counter_++); }

    // Uniform in [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Bias is O(n / 2^64), irrelevant here.
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

  private:
    std::uint64_t state_;
    std::uint64_t counter_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace calpa
