// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "mslora/matrix.hpp"

namespace mslora {

/// Counter-based generator: output i is the SplitMix64 finalizer applied to
/// seed + (i + 1) * 0x9E3779B97F4A7C15. Fully specified so streams can be
/// reproduced outside this code base.
///
///   uniform()  = (x >> 11) * 2^-53                       in [0, 1)
///   gaussian() = Box-Muller on u1 = ((x1 >> 11) + 1) * 2^-53, u2 = uniform():
///                sqrt(-2 ln u1) * cos(2 pi u2), then sqrt(-2 ln u1) * sin(2 pi u2)
class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed) noexcept : seed_(seed) {}

    static std::uint64_t mix(std::uint64_t z) noexcept;

    std::uint64_t next_u64() noexcept;
    double uniform() noexcept;
    double gaussian() noexcept;
    /// Uniform integer in [0, bound) by rejection; bound must be > 0.
    std::uint64_t below(std::uint64_t bound) noexcept;

    std::uint64_t counter() const noexcept { return counter_; }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Derives an independent stream seed from a parent seed and a tag.
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t tag) noexcept;

Matrix gaussian_matrix(CounterRng& rng, std::size_t rows, std::size_t cols, double stddev);

} // namespace mslora
