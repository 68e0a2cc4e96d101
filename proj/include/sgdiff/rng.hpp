#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "sgdiff/common.hpp"
#include "sgdiff/tensor.hpp"

namespace sgdiff {

// Counter-based PRNG. The i-th output of a stream is
//
//   out(i) = mix(mix(seed ^ mix(stream)) + GOLDEN * i)
//
// where mix is the SplitMix64 finalizer and GOLDEN = 2^64 / phi. Identical
// (seed, stream, counter) therefore give identical draws on every platform,
// and draws can be generated out of order. Streams are split per consumer
// ("data", "init", "sampler", ...) so adding draws to one consumer never
// shifts another's sequence.
struct RngState {
    std::string algorithm = "splitmix64-counter";
    uint64_t seed = 0;
    uint64_t stream = 0;
    uint64_t counter = 0;
};

namespace detail {
inline uint64_t sm64_mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}
inline constexpr uint64_t kGolden = 0x9e3779b97f4a7c15ull;
}  // namespace detail

class Rng {
public:
    Rng() = default;
    explicit Rng(uint64_t seed, uint64_t stream = 0) { state_ = {"splitmix64-counter", seed, stream, 0}; }
    explicit Rng(RngState state) : state_(std::move(state)) {}

    const RngState& state() const { return state_; }

    // Derived stream; the child starts at counter 0.
    Rng split(uint64_t key) const {
        Rng r;
        r.state_.seed = state_.seed;
        r.state_.stream = detail::sm64_mix(state_.stream * detail::kGolden + detail::sm64_mix(key + 1));
        return r;
    }
    Rng split(std::string_view label) const { return split(fnv1a(label)); }
    Rng split(std::string_view label, uint64_t index) const { return split(label).split(index); }

    uint64_t next_u64() {
        uint64_t base = detail::sm64_mix(state_.seed ^ detail::sm64_mix(state_.stream));
        uint64_t out = detail::sm64_mix(base + detail::kGolden * state_.counter);
        state_.counter++;
        return out;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    uint64_t uniform_index(uint64_t n) {
        SGDIFF_CHECK(n > 0, "uniform_index(0)");
        return next_u64() % n;
    }

    // Standard normal via Box-Muller on two uniform draws. Always consumes
    // two counter values per pair; the second value of each pair is cached.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    TensorT<T> gauss(Shape shape) {
        TensorT<T> t(std::move(shape));
        for (int64_t i = 0; i < t.numel(); i++) t.at(i) = static_cast<T>(gaussian());
        return t;
    }

    template <typename T>
    TensorT<T> gauss_scaled(Shape shape, double stddev) {
        TensorT<T> t(std::move(shape));
        for (int64_t i = 0; i < t.numel(); i++) t.at(i) = static_cast<T>(stddev * gaussian());
        return t;
    }

    // Fisher-Yates permutation of 0..n-1.
    std::vector<int64_t> permutation(int64_t n) {
        std::vector<int64_t> p(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; i++) p[static_cast<size_t>(i)] = i;
        for (int64_t i = n - 1; i > 0; i--) {
            auto j = static_cast<int64_t>(uniform_index(static_cast<uint64_t>(i + 1)));
            std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]);
        }
        return p;
    }

private:
    RngState state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace sgdiff
