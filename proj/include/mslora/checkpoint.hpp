// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "mslora/lora.hpp"
#include "mslora/matrix.hpp"
#include "mslora/optimizer.hpp"
#include "mslora/snapshot.hpp"

namespace mslora {

inline constexpr std::uint32_t matrix_file_version = 1;
inline constexpr int manifest_schema_version = 1;

/// Binary matrix file: "MSLR", u32 version, u32 rows, u32 cols, then
/// rows*cols little-endian IEEE-754 doubles in row-major order.
void write_matrix_file(const Matrix& m, const std::filesystem::path& path);
Matrix read_matrix_file(const std::filesystem::path& path);

struct Checkpoint {
    ToyModel model;
    std::vector<StabilitySnapshot> snapshots;
    std::optional<AdamW> optimizer;
};

/// Writes `manifest.json` plus one binary file per matrix into `dir`. The
/// directory is assembled under a temporary name and renamed into place.
void save_checkpoint(const ToyModel& model, const std::vector<StabilitySnapshot>& snapshots, const AdamW* optimizer,
                     const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

} // namespace mslora
