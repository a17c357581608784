#pragma once

// Counter-based random streams. Every draw is a pure function of
// (master seed, stream label, counter), so any part of a run can be
// replayed or generated out of order without shared mutable state.

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "cxrl/tensor.hpp"

namespace cxrl::num {

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class RngStream {
public:
    RngStream(uint64_t master_seed, std::string label)
        : seed_(master_seed),
          label_(std::move(label)),
          base_(mix64(master_seed ^ 0x6a09e667f3bcc908ull) ^ fnv1a64(label_)),
          counter_(0) {}

    uint64_t master_seed() const { return seed_; }
    const std::string& label() const { return label_; }
    uint64_t counter() const { return counter_; }

    // Derived stream; independent of this stream's counter position.
    RngStream fork(std::string_view sublabel) const {
        return RngStream(seed_, label_ + "/" + std::string(sublabel));
    }

    uint64_t next_u64() { return at(counter_++); }

    // Uniform in [0,1).
    double next_uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    uint64_t next_below(uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller; consumes exactly two counter steps.
    double next_normal() {
        const double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0,1]
        const double u2 = double(next_u64() >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    template <typename T>
    TensorT<T> normal(Shape shape, double scale = 1.0) {
        TensorT<T> t(std::move(shape));
        for (auto& v : t.data) v = static_cast<T>(scale * next_normal());
        return t;
    }

    template <typename T>
    void fill_normal(TensorT<T>& t, double scale = 1.0) {
        for (auto& v : t.data) v = static_cast<T>(scale * next_normal());
    }

private:
    uint64_t at(uint64_t i) const { return mix64(base_ + i * 0x9e3779b97f4a7c15ull); }

    uint64_t seed_;
    std::string label_;
    uint64_t base_;
    uint64_t counter_;
};

inline RngStream rng_stream(uint64_t master_seed, std::string label) {
    return RngStream(master_seed, std::move(label));
}

}  // namespace cxrl::num
