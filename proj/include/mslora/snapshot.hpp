// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mslora/lora.hpp"
#include "mslora/matrix.hpp"

namespace mslora {

/// Logits of one task's evaluation batch, captured right after the task finished training.
struct StabilitySnapshot {
    std::string task_id;
    std::uint64_t input_hash = 0;
    MaskPolicy policy = MaskPolicy::prefix;
    Matrix logits;
    Matrix inputs;                   // evaluation batch, one example per column
    std::vector<std::size_t> labels; // its labels
    std::size_t captured_after = 0; // number of tasks learned at capture time
    double accuracy = 0.0;
};

} // namespace mslora
