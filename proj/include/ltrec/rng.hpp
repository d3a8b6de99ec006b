#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ltrec/errors.hpp"

namespace ltrec {

// Deterministic, labeled seed derivation: every pipeline stage derives its
// own stream from the single config seed so that stages can be re-run in
// isolation with stable randomness. FNV-1a over the label mixed into the
// master seed, finalized splitmix-style.
inline uint64_t derive_seed(uint64_t master, std::string_view label) {
    uint64_t h = 1469598103934665603ull ^ master;
    for (char c : label) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    h ^= h >> 30;
    h *= 0xbf58476d1ce4e5b9ull;
    h ^= h >> 27;
    h *= 0x94d049bb133111ebull;
    h ^= h >> 31;
    return h;
}

// mt19937_64 core with hand-rolled distributions. The std distribution
// objects are implementation-defined, which would break bit-exact
// reproducibility across standard libraries, so everything here is built
// from raw 64-bit draws.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    uint64_t uniform_int(uint64_t n) {
        if (n == 0) throw DomainError("Rng::uniform_int: n must be positive");
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; one value per call, cached pair not kept so draw order
    // stays trivially reproducible.
    double gaussian() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    std::vector<double> gaussian_vec(int n, double mean = 0.0, double stddev = 1.0) {
        std::vector<double> out(static_cast<size_t>(n));
        for (auto& x : out) x = gaussian(mean, stddev);
        return out;
    }

    // Fisher-Yates over indices 0..n-1.
    std::vector<size_t> permutation(size_t n) {
        std::vector<size_t> p(n);
        for (size_t i = 0; i < n; ++i) p[i] = i;
        for (size_t i = n; i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(static_cast<uint64_t>(i)));
            std::swap(p[i - 1], p[j]);
        }
        return p;
    }

    std::string state_str() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void restore_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (!is) throw DataError("Rng::restore_state: malformed engine state");
    }

private:
    std::mt19937_64 engine_;
};

// Sampler over a fixed weight vector via cumulative sums + binary search.
class CumulativeSampler {
public:
    explicit CumulativeSampler(const std::vector<double>& weights) {
        if (weights.empty())
            throw DomainError("CumulativeSampler: empty weight vector");
        cum_.reserve(weights.size());
        double total = 0.0;
        for (double w : weights) {
            if (!(w >= 0.0))
                throw DomainError("CumulativeSampler: negative weight");
            total += w;
            cum_.push_back(total);
        }
        if (!(total > 0.0))
            throw DomainError("CumulativeSampler: weights sum to zero");
        total_ = total;
    }

    int sample(Rng& rng) const {
        double u = rng.uniform() * total_;
        auto it = std::lower_bound(cum_.begin(), cum_.end(), u);
        if (it == cum_.end()) --it;
        return static_cast<int>(it - cum_.begin());
    }

private:
    std::vector<double> cum_;
    double total_ = 0.0;
};

// Normalized Zipf masses w_r proportional to (r+1)^-s for ranks 0..n-1.
inline std::vector<double> zipf_weights(int n, double s) {
    if (n < 1) throw DomainError("zipf_weights: n must be >= 1");
    if (!(s > 0.0)) throw DomainError("zipf_weights: exponent must be positive");
    std::vector<double> w(static_cast<size_t>(n));
    double total = 0.0;
    for (int r = 0; r < n; ++r) {
        w[r] = std::pow(static_cast<double>(r + 1), -s);
        total += w[r];
    }
    for (auto& x : w) x /= total;
    return w;
}

}  // namespace ltrec
