// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mslora/trainer.hpp"

namespace mslora {

/// A full experiment: run hyperparameters, the ordered task sequence and where outputs go.
///
/// File format: INI-style sections of `key = value` lines, `#` or `;` comments.
///
///   [model]      depth, width, placement (all | shallow[:k] | deep[:k])
///   [lora]       rank, alpha
///   [loss]       alpha, beta, cr.reduce (sum | mean), similarity.normalize
///   [optimizer]  lr, betas ("b1, b2"), epsilon, warmup_ratio, weight_decay (must be 0)
///   [runtime]    seed, determinism, output
///   [mask]       policy (prefix | single | modality | all)
///   [sequence]   steps, batch            (defaults for every task)
///   [task.<id>]  modality, data, classes, steps, batch   (one per task, in order)
///
/// Unknown sections and keys are rejected; omitted keys take their defaults.
struct ExperimentConfig {
    RunConfig run;
    std::vector<TaskSpec> tasks;
    std::filesystem::path output_dir = "runs/default";
    std::size_t default_steps = 300;
    std::size_t default_batch = 32;

    void validate() const;
};

ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Effective configuration in the same file format; parse_config(render_config(c)) reproduces c.
std::string render_config(const ExperimentConfig& config);

} // namespace mslora
