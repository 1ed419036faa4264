// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mslora/autodiff.hpp"
#include "mslora/lora.hpp"

namespace mslora {

/// Builds a scalar from parameters bound through `binder`. The checker binds
/// every matrix in its parameter list as trainable before calling.
using ScalarFn = std::function<Var(ParamBinder& binder)>;

struct GradientCheck {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
};

/// Central differences over every entry of every parameter. The relative error
/// of one parameter is max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12).
/// Parameters are perturbed in place and restored.
GradientCheck check_gradient(const ScalarFn& fn, const std::vector<Matrix*>& params, double step = 1e-5);

struct BatteryEntry {
    std::string name;
    std::size_t instances = 0;
    double max_rel_error = 0.0;
    bool passed = false;
};

struct BatteryOptions {
    std::size_t instances = 50;
    double step = 1e-5;
    double tolerance = 1e-6;
    std::uint64_t seed = 7;
};

/// Finite-difference battery over every tape operation and every regularizer on
/// random inputs in [-1, 1], keeping relu and abs arguments away from their kinks.
std::vector<BatteryEntry> run_gradient_battery(const BatteryOptions& options = {});

nlohmann::json to_json(const BatteryEntry& e);

} // namespace mslora
