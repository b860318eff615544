#pragma once

// Shared plumbing: error taxonomy, deterministic RNG, small helpers.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace npap {

// ---------------------------------------------------------------------------
// Errors. Categories map to CLI exit codes: config=2, data=3, divergence=4.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : Error { using Error::Error; };        // exit 2
struct DataError : Error { using Error::Error; };          // exit 3
struct DivergenceError : Error { using Error::Error; };    // exit 4

struct MissingLetterError : DataError { using DataError::DataError; };
struct InsufficientBankError : DataError { using DataError::DataError; };
struct InsufficientDocumentsError : DataError { using DataError::DataError; };
struct ShapeMismatchError : DataError { using DataError::DataError; };
struct HeadCountMismatchError : DataError { using DataError::DataError; };
struct InvalidWeightsError : DataError { using DataError::DataError; };
struct ZeroVectorError : DataError { using DataError::DataError; };
struct EmptyGalleryError : DataError { using DataError::DataError; };
struct EmptyIndexError : DataError { using DataError::DataError; };
struct IoError : DataError { using DataError::DataError; };

// printf-style formatting into std::string; keeps error messages short.
template <typename... Args>
std::string strf(const char* fmt, Args... args) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), fmt, args...);
    return std::string(buf);
}

// ---------------------------------------------------------------------------
// RNG. xoshiro256** seeded through splitmix64. Self-contained so every seeded
// operation is bit-deterministic across platforms and standard libraries.
// `child(stream)` derives an independent stream from (seed, stream); all
// per-sample randomness goes through children so parallel and serial builds
// of a dataset agree.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) {
    uint64_t x = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
    return splitmix64(x);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
        have_spare_ = false;
    }

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Unbiased integer in [0, n).
    uint64_t below(uint64_t n) {
        if (n == 0) throw Error("Rng::below(0)");
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller (cached spare).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Independent derived stream; deterministic in (seed, stream).
    Rng child(uint64_t stream) const { return Rng(mix64(seed_, stream)); }

    template <class Vec>
    void shuffle(Vec& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4];
    uint64_t seed_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace npap
