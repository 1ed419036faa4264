// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mslora/autodiff.hpp"
#include "mslora/lora.hpp"
#include "mslora/snapshot.hpp"
#include "mslora/taskgen.hpp"

namespace mslora {

std::vector<std::size_t> argmax_rows(const Matrix& logits);

/// Fraction of `indices` classified correctly under the model's current masks.
double accuracy(const ToyModel& model, const LabeledDataset& data, std::span<const std::size_t> indices,
                std::string_view task_id);

/// Captures logits of the task's test split under `policy`.
StabilitySnapshot capture_snapshot(ToyModel& model, const LabeledDataset& data, std::string_view task_id,
                                   MaskPolicy policy);

// --- gradient equivalence ---------------------------------------------------

/// Builds a scalar loss from the logits of the compared task.
using LossBuilder = std::function<Var(ParamBinder& binder, const ToyModel& model, Var logits)>;

struct Prop1Report {
    std::size_t layer = 0;
    std::string task_id;
    double dense_vs_base = 0.0;  // max |dL/dD - dL/dW|
    double fd_rel_error = 0.0;   // max-norm relative error of dL/dD vs central differences
    double tolerance = 0.0;
    double fd_tolerance = 0.0;
    bool passed = false;
};

/// Compares dL/dD for a trainable dense delta D at `layer` with dL/dW for
/// trainable W, and checks dL/dD against finite differences. The compared
/// branch is the layer's unfrozen one; masks are set to its prefix.
Prop1Report verify_prop1(const ToyModel& model, std::size_t layer, const LossBuilder& loss, const Matrix& inputs,
                         double tolerance = 1e-12, double fd_tolerance = 1e-6, double fd_step = 1e-5);

// --- stability ----------------------------------------------------------------

struct StabilityEntry {
    std::string task_id;
    double max_abs_deviation = 0.0;
    bool bitwise_equal = false;
};

struct StabilityReport {
    std::vector<StabilityEntry> entries;
    double max_abs_deviation = 0.0;
    bool all_bitwise_equal = true;
};

/// Recomputes every snapshot's logits on the current model. `inputs` maps task
/// id to the evaluation batch the snapshot was captured on.
StabilityReport stability_replay(ToyModel& model, std::span<const StabilitySnapshot> snapshots,
                                 const std::map<std::string, Matrix>& inputs, MaskPolicy policy);

// --- parameter similarity -------------------------------------------------------

struct SimilarityMatrix {
    std::vector<std::string> task_ids;
    Matrix values;
};

/// Entry (i, j): branch similarity of tasks i and j averaged over placed layers.
SimilarityMatrix similarity_matrix(const ToyModel& model, bool normalize = true);

struct ModalityGap {
    double mean_same = 0.0;
    double mean_cross = 0.0;
    std::size_t same_pairs = 0;
    std::size_t cross_pairs = 0;
    double gap() const { return mean_same - mean_cross; }
};

/// Mean off-diagonal similarity among same-modality and cross-modality pairs.
ModalityGap modality_gap(const ToyModel& model, const SimilarityMatrix& sim);

void write_similarity_csv(const SimilarityMatrix& sim, const std::filesystem::path& path);

// --- accuracy and forgetting ------------------------------------------------------

struct TaskAccuracy {
    std::string task_id;
    double accuracy_now = 0.0;
    double accuracy_after = 0.0;
    double forgetting = 0.0;
};

std::vector<TaskAccuracy> accuracy_and_forgetting(ToyModel& model, const std::map<std::string, LabeledDataset>& datasets,
                                                  std::span<const StabilitySnapshot> snapshots, MaskPolicy policy);

// --- exports -------------------------------------------------------------------

struct EmbeddingSource {
    std::string task_id;
    const LabeledDataset* data = nullptr;
};

/// One row per example: f0..f{d-1} (last hidden layer activations), task_id, modality_id, split.
void export_embeddings(ToyModel& model, std::span<const EmbeddingSource> sources, MaskPolicy policy,
                       const std::filesystem::path& path);

/// Long-format merged deltas under the current masks: layer,row,col,value.
void export_merged_deltas(const ToyModel& model, const std::filesystem::path& path);

nlohmann::json to_json(const Prop1Report& r);
nlohmann::json to_json(const StabilityReport& r);
nlohmann::json to_json(const SimilarityMatrix& s);
nlohmann::json to_json(const TaskAccuracy& a);

} // namespace mslora
