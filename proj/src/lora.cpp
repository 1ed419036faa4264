// SPDX-License-Identifier: Apache-2.0
#include "mslora/lora.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <utility>

#include <fmt/format.h>

#include "mslora/errors.hpp"
#include "mslora/rng.hpp"

namespace mslora {

Var ParamBinder::bind(const Matrix& param, bool trainable) {
    auto it = vars_.find(&param);
    if (it != vars_.end()) {
        return it->second;
    }
    Var v = tape_->leaf(param, trainable);
    vars_.emplace(&param, v);
    return v;
}

std::optional<Var> ParamBinder::find(const Matrix& param) const {
    auto it = vars_.find(&param);
    if (it == vars_.end()) {
        return std::nullopt;
    }
    return it->second;
}

const Matrix* ParamBinder::grad(const Matrix& param) const {
    auto v = find(param);
    if (!v || !tape_->requires_grad(*v)) {
        return nullptr;
    }
    return &tape_->grad(*v);
}

BranchStack::BranchStack(Matrix weight, Matrix bias) : weight_(std::move(weight)), bias_(std::move(bias)) {
    if (bias_.rows() != weight_.rows() || bias_.cols() != 1) {
        throw ShapeError(fmt::format("layer bias {} does not match weight {}", shape_str(bias_), shape_str(weight_)));
    }
}

void BranchStack::check_branch(const LoraBranch& branch) const {
    if (branch.rank == 0 || branch.rank > std::min(out_dim(), in_dim())) {
        throw ShapeError(fmt::format("rank {} exceeds layer dimensions {}", branch.rank, shape_str(weight_)));
    }
    if (branch.a.rows() != out_dim() || branch.a.cols() != branch.rank || branch.b.rows() != branch.rank ||
        branch.b.cols() != in_dim()) {
        throw ShapeError(fmt::format("branch shapes a={} b={} incompatible with weight {} at rank {}",
                                     shape_str(branch.a), shape_str(branch.b), shape_str(weight_), branch.rank));
    }
    if (!branches_.empty() && branches_.front().rank != branch.rank) {
        throw ShapeError(fmt::format("heterogeneous ranks in one layer: {} vs {}", branches_.front().rank,
                                     branch.rank));
    }
    if (find(branch.task_id) != nullptr) {
        throw Error(fmt::format("layer already has a branch for task '{}'", branch.task_id));
    }
}

LoraBranch& BranchStack::expand_branch(std::string task_id, std::string modality_id, std::size_t rank, double scale,
                                       std::uint64_t seed) {
    if (rank == 0 || rank > std::min(out_dim(), in_dim())) {
        throw ShapeError(fmt::format("rank {} exceeds layer dimensions {}", rank, shape_str(weight_)));
    }
    CounterRng rng(seed);
    LoraBranch branch;
    branch.a = Matrix(out_dim(), rank);
    branch.b = gaussian_matrix(rng, rank, in_dim(), branch_init_stddev);
    branch.rank = rank;
    branch.task_id = std::move(task_id);
    branch.modality_id = std::move(modality_id);
    branch.scale = scale;
    check_branch(branch);
    branches_.push_back(std::move(branch));
    mask_.push_back(1);
    return branches_.back();
}

void BranchStack::restore_branch(LoraBranch branch, bool active) {
    check_branch(branch);
    branches_.push_back(std::move(branch));
    mask_.push_back(active ? 1 : 0);
}

LoraBranch* BranchStack::find(std::string_view task_id) {
    for (auto& b : branches_) {
        if (b.task_id == task_id) {
            return &b;
        }
    }
    return nullptr;
}

const LoraBranch* BranchStack::find(std::string_view task_id) const {
    return const_cast<BranchStack*>(this)->find(task_id);
}

void BranchStack::freeze_branch(std::string_view task_id) {
    LoraBranch* b = find(task_id);
    if (b == nullptr) {
        throw Error(fmt::format("no branch for task '{}'", task_id));
    }
    b->frozen = true;
}

void BranchStack::set_mask(std::span<const int> mask) {
    if (mask.size() != branches_.size()) {
        throw Error(fmt::format("mask length {} does not match {} branches", mask.size(), branches_.size()));
    }
    std::vector<std::uint8_t> next;
    next.reserve(mask.size());
    for (int m : mask) {
        if (m != 0 && m != 1) {
            throw Error(fmt::format("mask entries must be 0 or 1, got {}", m));
        }
        next.push_back(static_cast<std::uint8_t>(m));
    }
    mask_ = std::move(next);
}

std::size_t BranchStack::trainable_parameter_count() const {
    std::size_t count = 0;
    for (const auto& b : branches_) {
        if (!b.frozen) {
            count += b.a.size() + b.b.size();
        }
    }
    return count;
}

Matrix BranchStack::merged_delta() const {
    Matrix total(out_dim(), in_dim());
    for (std::size_t i = 0; i < branches_.size(); ++i) {
        if (mask_[i] != 0) {
            total += branches_[i].scale * branches_[i].delta();
        }
    }
    return total;
}

Var forward_masked(const BranchStack& stack, ParamBinder& binder, Var h, const LayerOverride& override) {
    const Matrix& hv = h.value();
    if (hv.rows() != stack.in_dim()) {
        throw ShapeError(fmt::format("layer input has {} rows, expected {}", hv.rows(), stack.in_dim()));
    }
    Var weight = binder.bind(stack.weight(), override.base_trainable);
    Var out = matmul(weight, h);
    if (override.dense_delta != nullptr) {
        out = add(out, matmul(binder.bind(*override.dense_delta, true), h));
    }
    out = add_col_bias(out, binder.bind(stack.bias(), false));
    const auto branches = stack.branches();
    for (std::size_t i = 0; i < branches.size(); ++i) {
        if (stack.mask()[i] == 0) {
            continue;
        }
        const LoraBranch& br = branches[i];
        Var a = binder.bind(br.a, !br.frozen);
        Var b = binder.bind(br.b, !br.frozen);
        Var contrib = matmul(a, matmul(b, h));
        if (br.scale != 1.0) {
            contrib = scale(contrib, br.scale);
        }
        out = add(out, contrib);
    }
    return out;
}

MaskPolicy parse_mask_policy(std::string_view text) {
    if (text == "prefix") return MaskPolicy::prefix;
    if (text == "single") return MaskPolicy::single;
    if (text == "modality") return MaskPolicy::modality;
    if (text == "all") return MaskPolicy::all;
    throw ConfigError(fmt::format("unknown mask policy '{}' (expected prefix|single|modality|all)", text));
}

std::string_view to_string(MaskPolicy policy) {
    switch (policy) {
    case MaskPolicy::prefix: return "prefix";
    case MaskPolicy::single: return "single";
    case MaskPolicy::modality: return "modality";
    case MaskPolicy::all: return "all";
    }
    return "?";
}

Placement Placement::parse(std::string_view text) {
    Placement p;
    std::string_view head = text;
    std::string_view count;
    if (auto colon = text.find(':'); colon != std::string_view::npos) {
        head = text.substr(0, colon);
        count = text.substr(colon + 1);
    }
    if (head == "all") {
        p.kind = Kind::all;
    } else if (head == "shallow") {
        p.kind = Kind::shallow;
    } else if (head == "deep") {
        p.kind = Kind::deep;
    } else {
        throw ConfigError(fmt::format("unknown placement '{}' (expected all|shallow[:k]|deep[:k])", text));
    }
    if (!count.empty()) {
        if (p.kind == Kind::all) {
            throw ConfigError("placement 'all' takes no layer count");
        }
        auto [ptr, ec] = std::from_chars(count.data(), count.data() + count.size(), p.k);
        if (ec != std::errc{} || ptr != count.data() + count.size() || p.k == 0) {
            throw ConfigError(fmt::format("invalid placement layer count '{}'", count));
        }
    }
    return p;
}

std::string Placement::to_string() const {
    switch (kind) {
    case Kind::all: return "all";
    case Kind::shallow: return k == 0 ? "shallow" : fmt::format("shallow:{}", k);
    case Kind::deep: return k == 0 ? "deep" : fmt::format("deep:{}", k);
    }
    return "?";
}

std::vector<std::size_t> Placement::layers(std::size_t depth) const {
    std::vector<std::size_t> out;
    if (kind == Kind::all) {
        for (std::size_t i = 0; i < depth; ++i) {
            out.push_back(i);
        }
        return out;
    }
    const std::size_t count = k == 0 ? (depth + 3) / 4 : k;
    if (count > depth) {
        throw ConfigError(fmt::format("placement {} needs {} layers but the model has {}", to_string(), count, depth));
    }
    const std::size_t first = kind == Kind::shallow ? 0 : depth - count;
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back(first + i);
    }
    return out;
}

ToyModel::ToyModel(std::size_t width, std::vector<BranchStack> layers, std::vector<std::size_t> placed,
                   Placement placement, std::vector<TaskHead> heads)
    : width_(width), layers_(std::move(layers)), placed_(std::move(placed)), placement_(placement),
      heads_(std::move(heads)) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (layers_[i].in_dim() != width_ || layers_[i].out_dim() != width_) {
            throw ShapeError(fmt::format("layer {} is {} but model width is {}", i, shape_str(layers_[i].weight()),
                                         width_));
        }
        if (!is_placed(i) && !layers_[i].branches().empty()) {
            throw Error(fmt::format("layer {} is outside the placement but holds branches", i));
        }
    }
    for (std::size_t p : placed_) {
        if (p >= layers_.size()) {
            throw Error(fmt::format("placed layer {} out of range", p));
        }
    }
}

ToyModel ToyModel::build(const ModelShape& shape, std::uint64_t seed) {
    if (shape.depth == 0 || shape.width < 2) {
        throw ConfigError("model needs at least one layer and width >= 2");
    }
    CounterRng rng(derive_seed(seed, 0x6261736557ULL));
    const double stddev = std::sqrt(2.0 / static_cast<double>(shape.width));
    std::vector<BranchStack> layers;
    for (std::size_t i = 0; i < shape.depth; ++i) {
        layers.emplace_back(gaussian_matrix(rng, shape.width, shape.width, stddev), Matrix(shape.width, 1));
    }
    return ToyModel(shape.width, std::move(layers), shape.placement.layers(shape.depth), shape.placement, {});
}

bool ToyModel::is_placed(std::size_t layer) const {
    return std::find(placed_.begin(), placed_.end(), layer) != placed_.end();
}

const TaskHead& ToyModel::head(std::string_view task_id) const {
    for (const auto& h : heads_) {
        if (h.task_id == task_id) {
            return h;
        }
    }
    throw Error(fmt::format("unknown task head '{}'", task_id));
}

TaskHead& ToyModel::head(std::string_view task_id) {
    return const_cast<TaskHead&>(std::as_const(*this).head(task_id));
}

bool ToyModel::has_task(std::string_view task_id) const {
    return std::any_of(heads_.begin(), heads_.end(), [&](const TaskHead& h) { return h.task_id == task_id; });
}

std::size_t ToyModel::task_index(std::string_view task_id) const {
    for (std::size_t i = 0; i < heads_.size(); ++i) {
        if (heads_[i].task_id == task_id) {
            return i;
        }
    }
    throw Error(fmt::format("unknown task '{}'", task_id));
}

void ToyModel::begin_task(const TaskHead& info, std::size_t rank, double scale, std::uint64_t seed) {
    if (has_task(info.task_id)) {
        throw Error(fmt::format("task '{}' already exists in the model", info.task_id));
    }
    if (info.class_count < 2) {
        throw Error(fmt::format("task '{}' needs at least 2 classes", info.task_id));
    }
    for (std::size_t layer : placed_) {
        layers_[layer].expand_branch(info.task_id, info.modality_id, rank, scale, derive_seed(seed, layer));
    }
    TaskHead head = info;
    CounterRng rng(derive_seed(seed, 0x68656164ULL));
    head.weight = gaussian_matrix(rng, width_, info.class_count, 1.0 / std::sqrt(static_cast<double>(width_)));
    head.bias = Matrix(1, info.class_count);
    head.frozen = false;
    heads_.push_back(std::move(head));
}

void ToyModel::freeze_task(std::string_view task_id) {
    TaskHead& h = head(task_id);
    for (std::size_t layer : placed_) {
        layers_[layer].freeze_branch(task_id);
    }
    h.frozen = true;
}

void ToyModel::apply_mask(MaskPolicy policy, std::string_view task_id) {
    const std::size_t target = task_index(task_id);
    const std::string& modality = heads_[target].modality_id;
    for (std::size_t layer : placed_) {
        BranchStack& stack = layers_[layer];
        std::vector<int> mask;
        for (const LoraBranch& b : stack.branches()) {
            const std::size_t idx = task_index(b.task_id);
            bool on = false;
            switch (policy) {
            case MaskPolicy::prefix: on = idx <= target; break;
            case MaskPolicy::single: on = idx == target; break;
            case MaskPolicy::modality: on = b.modality_id == modality; break;
            case MaskPolicy::all: on = true; break;
            }
            mask.push_back(on ? 1 : 0);
        }
        stack.set_mask(mask);
    }
}

std::size_t ToyModel::trainable_parameter_count() const {
    std::size_t count = 0;
    for (const auto& layer : layers_) {
        count += layer.trainable_parameter_count();
    }
    for (const auto& h : heads_) {
        if (!h.frozen) {
            count += h.weight.size() + h.bias.size();
        }
    }
    return count;
}

Var model_hidden(const ToyModel& model, ParamBinder& binder, Var x, const LayerProbe* probe) {
    Var h = x;
    for (std::size_t i = 0; i < model.depth(); ++i) {
        const LayerOverride override = (probe != nullptr && probe->layer == i) ? probe->override : LayerOverride{};
        h = relu(forward_masked(model.layer(i), binder, h, override));
    }
    return h;
}

Var model_forward(const ToyModel& model, ParamBinder& binder, Var x, std::string_view task_id,
                  const LayerProbe* probe) {
    const TaskHead& head = model.head(task_id);
    Var hidden = model_hidden(model, binder, x, probe);
    Var logits = matmul(transpose(hidden), binder.bind(head.weight, !head.frozen));
    return add_row_bias(logits, binder.bind(head.bias, !head.frozen));
}

Matrix eval_logits(const ToyModel& model, const Matrix& x, std::string_view task_id) {
    Tape tape;
    ParamBinder binder(tape);
    return model_forward(model, binder, tape.constant(x), task_id).value();
}

} // namespace mslora
