// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mslora/lora.hpp"
#include "mslora/optimizer.hpp"
#include "mslora/regularizers.hpp"
#include "mslora/snapshot.hpp"
#include "mslora/taskgen.hpp"

namespace mslora {

struct TaskSpec {
    std::string task_id;
    std::string modality_id;
    std::string dataset_ref;
    std::size_t class_count = 0;
    std::size_t steps = 300;
    std::size_t batch_size = 32;

    void validate() const;
};

/// Checks unique task ids and per-task constraints.
void validate_sequence(std::span<const TaskSpec> tasks);

struct RunConfig {
    ModelShape model;
    std::size_t rank = 4;
    double lora_alpha = 4.0;
    LossWeights weights;
    RegularizerOptions regularizers;
    double learning_rate = 1e-2;
    double warmup_ratio = 0.03;
    AdamWParams optimizer;
    MaskPolicy mask_policy = MaskPolicy::prefix;
    std::uint64_t seed = 0;
    bool determinism = true;

    double branch_scale() const { return lora_alpha / static_cast<double>(rank); }
    void validate() const;
};

struct StepTrace {
    std::size_t step = 0;
    double ce = 0.0;
    double cr = 0.0;
    double ortho = 0.0;
    double total = 0.0;
    double lr = 0.0;
};

struct TaskReport {
    std::string task_id;
    std::string modality_id;
    std::size_t steps = 0;
    std::size_t trainable_parameters = 0;
    double final_train_loss = 0.0;
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    std::vector<StepTrace> trace;
};

struct RunResult {
    std::vector<TaskReport> tasks;
    std::vector<StabilitySnapshot> snapshots;
};

struct RunOptions {
    /// When set, a checkpoint is written to <root>/task_<k> after task k (1-based).
    std::optional<std::filesystem::path> checkpoint_root;
    /// Where a diagnostic checkpoint goes when training hits a non-finite loss.
    std::optional<std::filesystem::path> diagnostic_dir;
    /// Snapshots carried over from a resumed run.
    std::vector<StabilitySnapshot> prior_snapshots;
    /// Called after each task is trained, frozen and checkpointed.
    std::function<void(const TaskReport&)> on_task_done;
};

/// Parameter names used for optimizer state and diagnostics.
std::string branch_param_name(std::size_t layer, std::string_view task_id, char which);
std::string head_param_name(std::string_view task_id, char which);

class ContinualTrainer {
public:
    explicit ContinualTrainer(RunConfig config);

    const RunConfig& config() const noexcept { return config_; }

    /// Trains the task's current branches and head for `task.steps` steps.
    /// Requires exactly one unfrozen branch per placed layer, owned by `task`.
    TaskReport train_task(ToyModel& model, const TaskSpec& task, const LabeledDataset& data,
                          const ModalityPartition& partition);

    /// Expands, trains, freezes, snapshots and checkpoints each task in order.
    /// Tasks already present and frozen in the model are skipped (resume).
    RunResult run_sequence(ToyModel& model, std::span<const TaskSpec> tasks, const RunOptions& options = {});

    /// Optimizer of the task being trained (or last trained).
    const AdamW& optimizer() const noexcept { return optimizer_; }

    LabeledDataset load_dataset(const TaskSpec& task) const;

private:
    RunConfig config_;
    AdamW optimizer_;
};

/// Stable seed used to split CSV datasets for a task.
std::uint64_t dataset_split_seed(std::uint64_t run_seed, std::string_view task_id);

nlohmann::json to_json(const RunConfig& config);
nlohmann::json to_json(const TaskSpec& task);
nlohmann::json to_json(const TaskReport& report);
/// Loss trace with columns step, ce, cr, ortho, total, lr; `step` counts across the whole sequence.
void write_trace_csv(std::span<const TaskReport> reports, const std::filesystem::path& path);

} // namespace mslora
