// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mslora/autodiff.hpp"
#include "mslora/matrix.hpp"

namespace mslora {

inline constexpr double branch_init_stddev = 0.02;

/// One task's low-rank pair at one layer. delta = a * b, applied with `scale`.
struct LoraBranch {
    Matrix a; // d_out x rank, zero at creation
    Matrix b; // rank x d_in
    std::size_t rank = 0;
    std::string task_id;
    std::string modality_id;
    bool frozen = false;
    double scale = 1.0;

    Matrix delta() const { return matmul(a, b); }
};

/// Maps parameter matrices to tape leaves so that every use of a parameter in
/// one step shares a single node and gradients accumulate in one place.
class ParamBinder {
public:
    explicit ParamBinder(Tape& tape) : tape_(&tape) {}

    Var bind(const Matrix& param, bool trainable);
    std::optional<Var> find(const Matrix& param) const;
    /// Gradient for a bound trainable parameter; nullptr when unbound or constant.
    const Matrix* grad(const Matrix& param) const;
    Tape& tape() const noexcept { return *tape_; }

private:
    Tape* tape_;
    std::unordered_map<const Matrix*, Var> vars_;
};

/// One adapted linear layer: frozen base (weight, bias) plus masked branches.
class BranchStack {
public:
    BranchStack() = default;
    BranchStack(Matrix weight, Matrix bias);

    std::size_t out_dim() const noexcept { return weight_.rows(); }
    std::size_t in_dim() const noexcept { return weight_.cols(); }
    const Matrix& weight() const noexcept { return weight_; }
    const Matrix& bias() const noexcept { return bias_; }

    /// Appends an unfrozen branch with a = 0 and b ~ N(0, 0.02^2); its mask bit is set.
    LoraBranch& expand_branch(std::string task_id, std::string modality_id, std::size_t rank, double scale,
                              std::uint64_t seed);
    /// Re-attaches a branch restored from a checkpoint.
    void restore_branch(LoraBranch branch, bool active);

    void freeze_branch(std::string_view task_id);
    void set_mask(std::span<const int> mask);
    const std::vector<std::uint8_t>& mask() const noexcept { return mask_; }

    std::span<LoraBranch> branches() noexcept { return branches_; }
    std::span<const LoraBranch> branches() const noexcept { return branches_; }
    LoraBranch* find(std::string_view task_id);
    const LoraBranch* find(std::string_view task_id) const;
    std::size_t trainable_parameter_count() const;

    /// Sum of mask_i * scale_i * a_i b_i, off the tape.
    Matrix merged_delta() const;

private:
    void check_branch(const LoraBranch& branch) const;

    Matrix weight_;
    Matrix bias_;
    std::vector<LoraBranch> branches_;
    std::vector<std::uint8_t> mask_;
};

/// Hooks used by the gradient-equivalence check. With `base_trainable` the
/// frozen weight becomes a trainable leaf; `dense_delta` adds a trainable dense
/// matrix D so the layer computes (W + D) h.
struct LayerOverride {
    bool base_trainable = false;
    const Matrix* dense_delta = nullptr;
};

/// W h + bias + sum_i m_i scale_i a_i (b_i h). h is d_in x batch.
Var forward_masked(const BranchStack& stack, ParamBinder& binder, Var h, const LayerOverride& override = {});

enum class MaskPolicy { prefix, single, modality, all };
MaskPolicy parse_mask_policy(std::string_view text);
std::string_view to_string(MaskPolicy policy);

/// Which layers carry branches: every layer, the first k, or the last k.
struct Placement {
    enum class Kind { all, shallow, deep };
    Kind kind = Kind::all;
    std::size_t k = 0; // 0 means ceil(depth / 4)

    static Placement parse(std::string_view text);
    std::string to_string() const;
    std::vector<std::size_t> layers(std::size_t depth) const;
};

struct ModelShape {
    std::size_t depth = 3;
    std::size_t width = 16;
    Placement placement;
};

struct TaskHead {
    std::string task_id;
    std::string modality_id;
    std::size_t class_count = 0;
    std::string dataset_ref;
    std::uint64_t split_seed = 0; // train/test split of CSV datasets
    Matrix weight; // width x class_count
    Matrix bias;   // 1 x class_count
    bool frozen = false;
};

/// Frozen random MLP (depth x [width -> width], relu after each layer) with
/// per-task classification heads and LoRA branches on the placed layers.
class ToyModel {
public:
    ToyModel() = default;
    ToyModel(std::size_t width, std::vector<BranchStack> layers, std::vector<std::size_t> placed,
             Placement placement, std::vector<TaskHead> heads);

    static ToyModel build(const ModelShape& shape, std::uint64_t seed);

    std::size_t width() const noexcept { return width_; }
    std::size_t depth() const noexcept { return layers_.size(); }
    const Placement& placement() const noexcept { return placement_; }
    const std::vector<std::size_t>& placed_layers() const noexcept { return placed_; }
    bool is_placed(std::size_t layer) const;

    BranchStack& layer(std::size_t i) { return layers_.at(i); }
    const BranchStack& layer(std::size_t i) const { return layers_.at(i); }

    std::span<TaskHead> heads() noexcept { return heads_; }
    std::span<const TaskHead> heads() const noexcept { return heads_; }
    const TaskHead& head(std::string_view task_id) const;
    TaskHead& head(std::string_view task_id);
    bool has_task(std::string_view task_id) const;
    std::size_t task_index(std::string_view task_id) const;
    std::size_t task_count() const noexcept { return heads_.size(); }

    /// Adds one branch per placed layer and a fresh head for the task.
    void begin_task(const TaskHead& info, std::size_t rank, double scale, std::uint64_t seed);
    /// Freezes the task's branches and head.
    void freeze_task(std::string_view task_id);
    /// Sets every stack's mask for evaluating `task_id` under `policy`.
    void apply_mask(MaskPolicy policy, std::string_view task_id);

    std::size_t trainable_parameter_count() const;

private:
    std::size_t width_ = 0;
    std::vector<BranchStack> layers_;
    std::vector<std::size_t> placed_;
    Placement placement_;
    std::vector<TaskHead> heads_;
};

/// Optional per-layer override for one layer index.
struct LayerProbe {
    std::size_t layer = 0;
    LayerOverride override;
};

/// Activations after the last hidden layer (width x batch) using the current masks.
Var model_hidden(const ToyModel& model, ParamBinder& binder, Var x, const LayerProbe* probe = nullptr);
/// Logits (batch x class_count) of the given task head under the current masks.
Var model_forward(const ToyModel& model, ParamBinder& binder, Var x, std::string_view task_id,
                  const LayerProbe* probe = nullptr);

/// Plain evaluation helper: logits under the model's current masks.
Matrix eval_logits(const ToyModel& model, const Matrix& x, std::string_view task_id);

} // namespace mslora
