// SPDX-License-Identifier: Apache-2.0
#include "mslora/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "mslora/errors.hpp"

namespace mslora {

void AdamW::step(std::span<const ParamSlot> params, double lr) {
    ++step_;
    const double correction1 = 1.0 - std::pow(params_.beta1, static_cast<double>(step_));
    const double correction2 = 1.0 - std::pow(params_.beta2, static_cast<double>(step_));
    for (const ParamSlot& slot : params) {
        Matrix& p = *slot.value;
        const Matrix& g = *slot.grad;
        if (!p.same_shape(g)) {
            throw ShapeError(fmt::format("gradient {} does not match parameter '{}' {}", shape_str(g), slot.name,
                                         shape_str(p)));
        }
        auto [it, inserted] = state_.try_emplace(slot.name);
        Moments& m = it->second;
        if (inserted) {
            m.first = Matrix(p.rows(), p.cols());
            m.second = Matrix(p.rows(), p.cols());
        } else if (!m.first.same_shape(p)) {
            throw ShapeError(fmt::format("optimizer state for '{}' has shape {}, parameter is {}", slot.name,
                                         shape_str(m.first), shape_str(p)));
        }
        auto pd = p.data();
        auto gd = g.data();
        auto m1 = m.first.data();
        auto m2 = m.second.data();
        for (std::size_t i = 0; i < pd.size(); ++i) {
            pd[i] -= lr * params_.weight_decay * pd[i];
            m1[i] = params_.beta1 * m1[i] + (1.0 - params_.beta1) * gd[i];
            m2[i] = params_.beta2 * m2[i] + (1.0 - params_.beta2) * gd[i] * gd[i];
            const double m_hat = m1[i] / correction1;
            const double v_hat = m2[i] / correction2;
            pd[i] -= lr * m_hat / (std::sqrt(v_hat) + params_.epsilon);
        }
    }
}

void AdamW::restore(std::map<std::string, Moments> state, std::uint64_t step) {
    state_ = std::move(state);
    step_ = step;
}

std::size_t warmup_steps(std::size_t total_steps, double warmup_ratio) {
    const double raw = warmup_ratio * static_cast<double>(total_steps);
    return static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
}

double lr_at(std::size_t step, std::size_t total_steps, double lr_max, double warmup_ratio) {
    if (step >= total_steps) {
        throw Error(fmt::format("schedule step {} out of range for {} total steps", step, total_steps));
    }
    const std::size_t warmup = warmup_steps(total_steps, warmup_ratio);
    if (step < warmup) {
        return lr_max * static_cast<double>(step + 1) / static_cast<double>(warmup);
    }
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

} // namespace mslora
