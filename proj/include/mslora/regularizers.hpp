// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mslora/autodiff.hpp"
#include "mslora/lora.hpp"

namespace mslora {

/// Weights of the contrastive (alpha) and orthogonality (beta) terms.
struct LossWeights {
    double alpha = 0.1;
    double beta = 0.01;

    void validate() const;
};

enum class CrReduce { sum, mean };
CrReduce parse_cr_reduce(std::string_view text);
std::string_view to_string(CrReduce reduce);

struct RegularizerOptions {
    /// Normalize the Manhattan distance by element count (mean of the A and B
    /// distances). When false the raw sum over all entries of [A, B] is used.
    bool normalize_similarity = true;
    CrReduce reduce = CrReduce::sum;
};

/// Previously learned tasks split by whether they share the current task's modality.
struct ModalityPartition {
    std::vector<std::string> same_modality;
    std::vector<std::string> different_modality;
    std::string current;

    /// Partition of every task the model learned before `current`.
    static ModalityPartition from_model(const ToyModel& model, std::string_view current);
    /// Throws when the partition does not match the model's learned task set.
    void validate(const ToyModel& model) const;
};

/// Plain branch distance, off the tape.
double branch_distance(const LoraBranch& p, const LoraBranch& q, bool normalize = true);

/// exp(-dis(p, q)). Frozen branches enter as constants.
Var branch_similarity(ParamBinder& binder, const LoraBranch& p, const LoraBranch& q, bool normalize = true);

/// sum over same-modality branches of 1 - sim(w_i, w_t).
Var converge_loss(ParamBinder& binder, const LoraBranch& current, std::span<const LoraBranch* const> same,
                  bool normalize = true);
/// sum over different-modality branches of sim(w_i, w_t).
Var diverge_loss(ParamBinder& binder, const LoraBranch& current, std::span<const LoraBranch* const> different,
                 bool normalize = true);

/// converge + diverge at every placed layer, reduced across layers.
Var cr_loss(ParamBinder& binder, const ToyModel& model, const ModalityPartition& partition,
            const RegularizerOptions& options = {});

/// ||A^T A - I_r||_F^2 + ||B B^T - I_r||_F^2.
Var ortho_loss(ParamBinder& binder, const LoraBranch& branch);
/// ortho_loss summed over the current task's branch at every placed layer.
Var ortho_loss(ParamBinder& binder, const ToyModel& model, std::string_view task_id);

/// ce + alpha * cr + beta * ortho. Zero-weight terms are left out of the graph.
Var total_loss(Var ce, Var cr, Var ortho, const LossWeights& weights);

} // namespace mslora
