// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "mslora/matrix.hpp"

namespace mslora {

struct AdamWParams {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
};

/// A trainable matrix together with its gradient for the current step.
struct ParamSlot {
    std::string name;
    Matrix* value = nullptr;
    const Matrix* grad = nullptr;
};

struct Moments {
    Matrix first;
    Matrix second;
};

/// Adam with decoupled weight decay and bias correction. State is keyed by
/// parameter name and created lazily on the first step that sees a parameter.
class AdamW {
public:
    AdamW() = default;
    explicit AdamW(AdamWParams params) : params_(params) {}

    void step(std::span<const ParamSlot> params, double lr);

    const AdamWParams& params() const noexcept { return params_; }
    std::uint64_t step_count() const noexcept { return step_; }
    const std::map<std::string, Moments>& state() const noexcept { return state_; }
    void restore(std::map<std::string, Moments> state, std::uint64_t step);

private:
    AdamWParams params_;
    std::map<std::string, Moments> state_;
    std::uint64_t step_ = 0;
};

/// ceil(warmup_ratio * total) with a guard against representation error
/// (0.03 * 100 must give 3, not 4).
std::size_t warmup_steps(std::size_t total_steps, double warmup_ratio);

/// Linear warmup to lr_max over the warmup steps, then half-cosine to zero.
double lr_at(std::size_t step, std::size_t total_steps, double lr_max, double warmup_ratio);

} // namespace mslora
