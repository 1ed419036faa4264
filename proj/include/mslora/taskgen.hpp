// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mslora/matrix.hpp"

namespace mslora {

/// A modality is a fixed change of frame: x = transform * z + offset with an
/// orthogonal transform, shared by every task of that modality.
struct SyntheticModality {
    std::string modality_id;
    Matrix transform; // d x d, orthogonal
    Matrix offset;    // d x 1
    std::uint64_t seed = 0;
};

struct LabeledDataset {
    Matrix features; // d x N, one example per column
    std::vector<std::size_t> labels;
    std::size_t class_count = 0;
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;

    std::size_t dim() const noexcept { return features.rows(); }
    std::size_t size() const noexcept { return labels.size(); }
    Matrix gather(std::span<const std::size_t> indices) const;
    std::vector<std::size_t> gather_labels(std::span<const std::size_t> indices) const;
};

struct TaskGenOptions {
    std::size_t n_per_class = 200;
    double margin = 6.0;
};

inline constexpr int max_center_attempts = 1000;

SyntheticModality gen_modality(std::string modality_id, std::size_t dim, std::uint64_t seed);

/// C Gaussian clusters (unit variance) with centers at least `margin` apart in
/// base space, mapped through the modality frame; seeded 80/20 split.
LabeledDataset gen_task(const SyntheticModality& modality, std::uint64_t task_seed, std::size_t class_count,
                        const TaskGenOptions& options = {});

/// Seeded 80/20 shuffle split of N examples.
void assign_split(LabeledDataset& data, std::uint64_t seed);

/// `synth:<modality-seed>:<task-seed>:<C>`
struct SynthRef {
    std::uint64_t modality_seed = 0;
    std::uint64_t task_seed = 0;
    std::size_t class_count = 0;
};
bool is_synth_ref(std::string_view ref);
SynthRef parse_synth_ref(std::string_view ref);

/// Loads a dataset from a generator spec string or a CSV path. `split_seed` is
/// only used for CSV input.
LabeledDataset resolve_dataset(std::string_view ref, std::size_t dim, std::uint64_t split_seed,
                               const TaskGenOptions& options = {});

/// CSV with header `label,f0,...,f{d-1}`, one example per row.
void write_dataset_csv(const LabeledDataset& data, const std::filesystem::path& path);
LabeledDataset read_dataset_csv(const std::filesystem::path& path, std::uint64_t split_seed);

} // namespace mslora
