// SPDX-License-Identifier: Apache-2.0
#include "mslora/regularizers.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include <fmt/format.h>

#include "mslora/errors.hpp"

namespace mslora {

void LossWeights::validate() const {
    if (!std::isfinite(alpha) || !std::isfinite(beta) || alpha < 0.0 || beta < 0.0) {
        throw ConfigError(fmt::format("loss weights must be finite and non-negative (alpha={}, beta={})", alpha, beta));
    }
}

CrReduce parse_cr_reduce(std::string_view text) {
    if (text == "sum") return CrReduce::sum;
    if (text == "mean") return CrReduce::mean;
    throw ConfigError(fmt::format("unknown cr.reduce '{}' (expected sum|mean)", text));
}

std::string_view to_string(CrReduce reduce) {
    return reduce == CrReduce::sum ? "sum" : "mean";
}

ModalityPartition ModalityPartition::from_model(const ToyModel& model, std::string_view current) {
    ModalityPartition part;
    part.current = std::string(current);
    const std::size_t idx = model.task_index(current);
    const std::string& modality = model.heads()[idx].modality_id;
    for (std::size_t i = 0; i < idx; ++i) {
        const TaskHead& h = model.heads()[i];
        (h.modality_id == modality ? part.same_modality : part.different_modality).push_back(h.task_id);
    }
    return part;
}

void ModalityPartition::validate(const ToyModel& model) const {
    const std::size_t idx = model.task_index(current);
    const std::string& modality = model.heads()[idx].modality_id;
    std::vector<std::string> seen;
    auto check = [&](const std::vector<std::string>& ids, bool same) {
        for (const auto& id : ids) {
            if (id == current) {
                throw Error(fmt::format("partition contains the current task '{}'", id));
            }
            if (std::find(seen.begin(), seen.end(), id) != seen.end()) {
                throw Error(fmt::format("task '{}' appears twice in the partition", id));
            }
            seen.push_back(id);
            const std::size_t j = model.task_index(id);
            if (j >= idx) {
                throw Error(fmt::format("task '{}' was not learned before '{}'", id, current));
            }
            if ((model.heads()[j].modality_id == modality) != same) {
                throw Error(fmt::format("task '{}' is in the wrong modality subset", id));
            }
        }
    };
    check(same_modality, true);
    check(different_modality, false);
    if (seen.size() != idx) {
        throw Error(fmt::format("partition covers {} of {} learned tasks", seen.size(), idx));
    }
}

namespace {

void require_compatible(const LoraBranch& p, const LoraBranch& q) {
    if (!p.a.same_shape(q.a) || !p.b.same_shape(q.b)) {
        throw ShapeError(fmt::format("branch shapes differ: a {} vs {}, b {} vs {}", shape_str(p.a), shape_str(q.a),
                                     shape_str(p.b), shape_str(q.b)));
    }
}

Var zero_scalar(ParamBinder& binder) {
    return binder.tape().constant(Matrix(1, 1));
}

Var accumulate(std::optional<Var> total, Var term) {
    return total ? add(*total, term) : term;
}

} // namespace

double branch_distance(const LoraBranch& p, const LoraBranch& q, bool normalize) {
    require_compatible(p, q);
    double da = 0.0;
    double db = 0.0;
    for (std::size_t i = 0; i < p.a.size(); ++i) {
        da += std::abs(p.a.data()[i] - q.a.data()[i]);
    }
    for (std::size_t i = 0; i < p.b.size(); ++i) {
        db += std::abs(p.b.data()[i] - q.b.data()[i]);
    }
    if (!normalize) {
        return da + db;
    }
    return 0.5 * (da / static_cast<double>(p.a.size()) + db / static_cast<double>(p.b.size()));
}

Var branch_similarity(ParamBinder& binder, const LoraBranch& p, const LoraBranch& q, bool normalize) {
    require_compatible(p, q);
    Var da = mean_abs_diff(binder.bind(p.a, !p.frozen), binder.bind(q.a, !q.frozen));
    Var db = mean_abs_diff(binder.bind(p.b, !p.frozen), binder.bind(q.b, !q.frozen));
    Var dis = normalize ? scale(add(da, db), 0.5)
                        : add(scale(da, static_cast<double>(p.a.size())), scale(db, static_cast<double>(p.b.size())));
    return exp_neg(dis);
}

Var converge_loss(ParamBinder& binder, const LoraBranch& current, std::span<const LoraBranch* const> same,
                  bool normalize) {
    if (same.empty()) {
        return zero_scalar(binder);
    }
    Var one = binder.tape().constant(Matrix(1, 1, 1.0));
    std::optional<Var> total;
    for (const LoraBranch* prior : same) {
        total = accumulate(total, sub(one, branch_similarity(binder, *prior, current, normalize)));
    }
    return *total;
}

Var diverge_loss(ParamBinder& binder, const LoraBranch& current, std::span<const LoraBranch* const> different,
                 bool normalize) {
    if (different.empty()) {
        return zero_scalar(binder);
    }
    std::optional<Var> total;
    for (const LoraBranch* prior : different) {
        total = accumulate(total, branch_similarity(binder, *prior, current, normalize));
    }
    return *total;
}

Var cr_loss(ParamBinder& binder, const ToyModel& model, const ModalityPartition& partition,
            const RegularizerOptions& options) {
    partition.validate(model);
    if (model.placed_layers().empty()) {
        return zero_scalar(binder);
    }
    std::optional<Var> total;
    for (std::size_t layer : model.placed_layers()) {
        const BranchStack& stack = model.layer(layer);
        const LoraBranch* current = stack.find(partition.current);
        if (current == nullptr) {
            throw Error(fmt::format("layer {} has no branch for task '{}'", layer, partition.current));
        }
        auto collect = [&](const std::vector<std::string>& ids) {
            std::vector<const LoraBranch*> out;
            for (const auto& id : ids) {
                const LoraBranch* b = stack.find(id);
                if (b == nullptr) {
                    throw Error(fmt::format("layer {} has no branch for task '{}'", layer, id));
                }
                out.push_back(b);
            }
            return out;
        };
        const auto same = collect(partition.same_modality);
        const auto different = collect(partition.different_modality);
        Var layer_loss = add(converge_loss(binder, *current, same, options.normalize_similarity),
                             diverge_loss(binder, *current, different, options.normalize_similarity));
        total = accumulate(total, layer_loss);
    }
    if (options.reduce == CrReduce::mean) {
        return scale(*total, 1.0 / static_cast<double>(model.placed_layers().size()));
    }
    return *total;
}

Var ortho_loss(ParamBinder& binder, const LoraBranch& branch) {
    Tape& tape = binder.tape();
    Var identity = tape.constant(Matrix::identity(branch.rank));
    Var a = binder.bind(branch.a, !branch.frozen);
    Var b = binder.bind(branch.b, !branch.frozen);
    Var gram_a = matmul(transpose(a), a);
    Var gram_b = matmul(b, transpose(b));
    return add(frobenius_sq(sub(gram_a, identity)), frobenius_sq(sub(gram_b, identity)));
}

Var ortho_loss(ParamBinder& binder, const ToyModel& model, std::string_view task_id) {
    std::optional<Var> total;
    for (std::size_t layer : model.placed_layers()) {
        const LoraBranch* branch = model.layer(layer).find(task_id);
        if (branch == nullptr) {
            throw Error(fmt::format("layer {} has no branch for task '{}'", layer, task_id));
        }
        total = accumulate(total, ortho_loss(binder, *branch));
    }
    return total ? *total : zero_scalar(binder);
}

Var total_loss(Var ce, Var cr, Var ortho, const LossWeights& weights) {
    Var total = ce;
    if (weights.alpha != 0.0) {
        total = add(total, scale(cr, weights.alpha));
    }
    if (weights.beta != 0.0) {
        total = add(total, scale(ortho, weights.beta));
    }
    return total;
}

} // namespace mslora
