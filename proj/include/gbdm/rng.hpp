#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "gbdm/tensor.hpp"

namespace gbdm {

namespace detail {

// SplitMix64 finalizer; used both as the output mix and for stream hashing.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace detail

// Counter-based generator: each draw is a pure function of (seed, stream, counter),
// so identical seed + call sequence gives identical values on every platform.
// Streams are independent; adding draws in one stream does not perturb another.
class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t stream = 0) : seed_(seed), stream_(stream), counter_(0) {}

    Rng(uint64_t seed, const std::string& stream_name)
        : Rng(seed, detail::fnv1a(stream_name)) {}

    // Derived generator for a named substream; does not consume draws from this one.
    Rng fork(const std::string& name) const {
        return Rng(seed_, detail::mix64(stream_ ^ detail::fnv1a(name)));
    }
    Rng fork(uint64_t index) const {
        return Rng(seed_, detail::mix64(stream_ ^ detail::mix64(index + 1)));
    }

    uint64_t next_u64() {
        return detail::mix64(detail::mix64(seed_ ^ detail::mix64(stream_)) + counter_++);
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    uint64_t uniform_index(uint64_t n) { return next_u64() % n; }

    // Box-Muller; consumes two counter values per call, spare discarded to keep
    // the draw count a simple function of the call count.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    Tensor normal_tensor(Shape shape) {
        Tensor t(std::move(shape));
        for (auto& v : t.data) v = static_cast<float>(normal());
        return t;
    }

    Tensor uniform_tensor(Shape shape, double lo, double hi) {
        Tensor t(std::move(shape));
        for (auto& v : t.data) v = static_cast<float>(uniform(lo, hi));
        return t;
    }

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    uint64_t stream_;
    uint64_t counter_;
};

}  // namespace gbdm
