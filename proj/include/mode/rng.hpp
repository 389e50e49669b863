#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string_view>

#include "mode/tensor.hpp"

namespace mode {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

/// Child seed for a named stage: the stage name is hashed into the root.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stage) noexcept {
    return splitmix64(root ^ splitmix64(fnv1a(stage)));
}

/// Child seed for an indexed stream (probe i, expert e, ...).
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) noexcept {
    return splitmix64(splitmix64(root) + 0xD1B54A32D192ED03ull * (index + 1));
}

/// Seeded random stream. Normals come from Box-Muller on top of mt19937_64 so
/// the stream is identical across standard library implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }
    /// Number of raw 64-bit words consumed so far.
    std::uint64_t counter() const noexcept { return counter_; }

    std::uint64_t next_u64() {
        ++counter_;
        return engine_();
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ValueError("Rng::below: empty range");
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do x = next_u64();
        while (x >= limit);
        return x % n;
    }

    double normal() {
        if (spare_) {
            const double v = *spare_;
            spare_.reset();
            return v;
        }
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double th = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(th);
        return r * std::cos(th);
    }

    Rng fork(std::string_view stage) const { return Rng(derive_seed(seed_, stage)); }
    Rng fork(std::uint64_t index) const { return Rng(derive_seed(seed_, index)); }

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) std::iter_swap(first + (i - 1), first + below(i));
    }

  private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
    std::mt19937_64 engine_;
    std::optional<double> spare_;
};

template <typename Real = float>
Tensor<Real> sample_standard_normal(Rng& rng, const Shape& shape) {
    if (shape.empty() || volume(shape) == 0) throw ValueError("sample_standard_normal: empty shape");
    Tensor<Real> out(shape);
    for (auto& v : out) v = static_cast<Real>(rng.normal());
    return out;
}

}  // namespace mode
