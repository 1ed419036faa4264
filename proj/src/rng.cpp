// SPDX-License-Identifier: Apache-2.0
#include "mslora/rng.hpp"

#include <cmath>
#include <numbers>

namespace mslora {

namespace {
constexpr std::uint64_t golden_gamma = 0x9E3779B97F4A7C15ULL;
constexpr double two_pow_neg53 = 1.0 / 9007199254740992.0;
} // namespace

std::uint64_t CounterRng::mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::uint64_t CounterRng::next_u64() noexcept {
    ++counter_;
    return mix(seed_ + counter_ * golden_gamma);
}

double CounterRng::uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * two_pow_neg53;
}

double CounterRng::gaussian() noexcept {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * two_pow_neg53;
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

std::uint64_t CounterRng::below(std::uint64_t bound) noexcept {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x = next_u64();
    while (x >= limit) {
        x = next_u64();
    }
    return x % bound;
}

std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t tag) noexcept {
    return CounterRng::mix(parent ^ CounterRng::mix(tag + golden_gamma));
}

Matrix gaussian_matrix(CounterRng& rng, std::size_t rows, std::size_t cols, double stddev) {
    Matrix m(rows, cols);
    for (double& v : m.data()) {
        v = stddev * rng.gaussian();
    }
    return m;
}

} // namespace mslora
