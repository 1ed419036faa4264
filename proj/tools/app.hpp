// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mslora/config.hpp"
#include "mslora/lora.hpp"
#include "mslora/metrics.hpp"
#include "mslora/snapshot.hpp"
#include "mslora/trainer.hpp"

namespace mslora::app {

enum ExitCode : int { exit_ok = 0, exit_config = 1, exit_runtime = 2, exit_verification = 3 };

/// A trained sequence plus the metrics reports and sweeps are built from.
struct ExperimentOutcome {
    ToyModel model;
    RunResult result;
    StabilityReport stability;
    std::vector<TaskAccuracy> accuracy;
    SimilarityMatrix similarity;
    ModalityGap gap;
    std::string last_task;
    double last_ortho = 0.0; // orthogonality loss of the last task's branches, summed over placed layers
};

/// Untrained model for a config; the base weights depend only on the shape and seed.
ToyModel initial_model(const ExperimentConfig& config);

/// Trains every task of `config` not yet in `model`, then evaluates the result.
ExperimentOutcome run_experiment(const ExperimentConfig& config, ToyModel model, const RunOptions& options = {});

/// Metrics for an already trained model and its snapshots.
ExperimentOutcome evaluate_model(const ExperimentConfig& config, ToyModel model, RunResult result);

/// Copy of `model` with every task frozen plus one unfrozen probe task of the
/// given rank at scale 1. Its branches and head are random and nonzero.
ToyModel with_probe_task(const ToyModel& model, std::size_t rank, std::uint64_t seed);

struct SuiteResult {
    std::string name;
    bool passed = false;
    nlohmann::json detail;
};

/// Gradient equivalence on every placed layer of a probe task, for the
/// cross-entropy loss alone and for the full regularized loss.
SuiteResult prop1_suite(const ToyModel& model, std::size_t rank, const LossWeights& weights,
                        const RegularizerOptions& options, std::uint64_t seed);
/// Replays every snapshot against the model; passes when all are bitwise equal.
SuiteResult stability_suite(ToyModel& model, const std::vector<StabilitySnapshot>& snapshots);
SuiteResult grads_suite(std::size_t instances = 50);

/// Latest `task_<k>` checkpoint under `root`, if any.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& root);

/// Applies one sweep value to a config. Throws ConfigError for unparseable values.
ExperimentConfig apply_sweep_value(const ExperimentConfig& base, const std::string& axis, const std::string& value);

int cmd_train(const std::filesystem::path& config_path, const std::optional<std::filesystem::path>& output,
              bool resume, std::ostream& out, std::ostream& err);
int cmd_verify(const std::filesystem::path& target, const std::string& suite, std::ostream& out, std::ostream& err);
int cmd_sweep(const std::filesystem::path& config_path, const std::string& axis, const std::vector<std::string>& values,
              const std::optional<std::filesystem::path>& output, bool parallel, std::ostream& out,
              std::ostream& err);
int cmd_export(const std::filesystem::path& checkpoint, const std::string& what, const std::filesystem::path& path,
               bool force, std::ostream& out, std::ostream& err);

/// Command-line entry point.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace mslora::app
