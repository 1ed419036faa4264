// SPDX-License-Identifier: Apache-2.0
#include "mslora/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "mslora/errors.hpp"
#include "mslora/regularizers.hpp"

namespace mslora {

using nlohmann::json;
namespace fs = std::filesystem;

std::vector<std::size_t> argmax_rows(const Matrix& logits) {
    std::vector<std::size_t> out(logits.rows(), 0);
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        for (std::size_t c = 1; c < logits.cols(); ++c) {
            if (logits(r, c) > logits(r, out[r])) {
                out[r] = c;
            }
        }
    }
    return out;
}

namespace {

double accuracy_of(const Matrix& logits, std::span<const std::size_t> labels) {
    if (labels.empty()) {
        return 0.0;
    }
    const auto predicted = argmax_rows(logits);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        correct += predicted[i] == labels[i] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

std::ofstream open_output(const fs::path& path) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path);
    if (!out) {
        throw Error(fmt::format("cannot write {}", path.string()));
    }
    return out;
}

void finish_output(std::ofstream& out, const fs::path& path) {
    out.flush();
    if (!out) {
        throw Error(fmt::format("write failed for {}", path.string()));
    }
}

} // namespace

double accuracy(const ToyModel& model, const LabeledDataset& data, std::span<const std::size_t> indices,
                std::string_view task_id) {
    const Matrix logits = eval_logits(model, data.gather(indices), task_id);
    return accuracy_of(logits, data.gather_labels(indices));
}

StabilitySnapshot capture_snapshot(ToyModel& model, const LabeledDataset& data, std::string_view task_id,
                                   MaskPolicy policy) {
    model.apply_mask(policy, task_id);
    const Matrix inputs = data.gather(data.test);
    StabilitySnapshot snap;
    snap.task_id = std::string(task_id);
    snap.input_hash = content_hash(inputs);
    snap.policy = policy;
    snap.logits = eval_logits(model, inputs, task_id);
    snap.captured_after = model.task_index(task_id) + 1;
    snap.labels = data.gather_labels(data.test);
    snap.accuracy = accuracy_of(snap.logits, snap.labels);
    snap.inputs = inputs;
    return snap;
}

Prop1Report verify_prop1(const ToyModel& model, std::size_t layer, const LossBuilder& loss, const Matrix& inputs,
                         double tolerance, double fd_tolerance, double fd_step) {
    if (layer >= model.depth()) {
        throw Error(fmt::format("layer {} out of range", layer));
    }
    const LoraBranch* current = nullptr;
    for (const LoraBranch& b : model.layer(layer).branches()) {
        if (!b.frozen) {
            current = &b;
        }
    }
    if (current == nullptr) {
        throw Error(fmt::format("layer {} has no unfrozen branch to compare", layer));
    }
    if (current->scale != 1.0) {
        throw Error(fmt::format("gradient equivalence is stated for scale 1, branch has scale {}", current->scale));
    }

    ToyModel work = model;
    const std::string task_id = current->task_id;
    work.apply_mask(MaskPolicy::prefix, task_id);
    const BranchStack& stack = work.layer(layer);
    Matrix delta(stack.out_dim(), stack.in_dim());

    auto loss_with_delta = [&](const Matrix& d, ParamBinder& binder) {
        LayerProbe probe{layer, LayerOverride{false, &d}};
        Var logits = model_forward(work, binder, binder.tape().constant(inputs), task_id, &probe);
        return loss(binder, work, logits);
    };

    Tape dense_tape;
    ParamBinder dense_binder(dense_tape);
    Var dense_loss = loss_with_delta(delta, dense_binder);
    dense_tape.backward(dense_loss);
    const Matrix grad_delta = *dense_binder.grad(delta);

    Tape base_tape;
    ParamBinder base_binder(base_tape);
    LayerProbe base_probe{layer, LayerOverride{true, nullptr}};
    Var base_logits = model_forward(work, base_binder, base_tape.constant(inputs), task_id, &base_probe);
    Var base_loss = loss(base_binder, work, base_logits);
    base_tape.backward(base_loss);
    const Matrix grad_weight = *base_binder.grad(stack.weight());

    Matrix fd(delta.rows(), delta.cols());
    for (std::size_t i = 0; i < delta.size(); ++i) {
        const double saved = delta.data()[i];
        delta.data()[i] = saved + fd_step;
        Tape tp;
        ParamBinder bp(tp);
        const double plus = loss_with_delta(delta, bp).scalar();
        delta.data()[i] = saved - fd_step;
        Tape tm;
        ParamBinder bm(tm);
        const double minus = loss_with_delta(delta, bm).scalar();
        delta.data()[i] = saved;
        fd.data()[i] = (plus - minus) / (2.0 * fd_step);
    }

    Prop1Report report;
    report.layer = layer;
    report.task_id = task_id;
    report.tolerance = tolerance;
    report.fd_tolerance = fd_tolerance;
    report.dense_vs_base = max_abs_diff(grad_delta, grad_weight);
    const double scale_ref = std::max({max_abs(grad_delta), max_abs(fd), 1e-12});
    report.fd_rel_error = max_abs_diff(grad_delta, fd) / scale_ref;
    report.passed = report.dense_vs_base < tolerance && report.fd_rel_error < fd_tolerance;
    return report;
}

StabilityReport stability_replay(ToyModel& model, std::span<const StabilitySnapshot> snapshots,
                                 const std::map<std::string, Matrix>& inputs, MaskPolicy policy) {
    StabilityReport report;
    for (const StabilitySnapshot& snap : snapshots) {
        if (snap.policy != policy) {
            throw Error(fmt::format("snapshot for '{}' was captured under mask policy {}, replay requested {}",
                                    snap.task_id, to_string(snap.policy), to_string(policy)));
        }
        auto it = inputs.find(snap.task_id);
        if (it == inputs.end()) {
            throw Error(fmt::format("no replay input for task '{}'", snap.task_id));
        }
        if (content_hash(it->second) != snap.input_hash) {
            throw Error(fmt::format("input batch hash mismatch for task '{}'", snap.task_id));
        }
        model.apply_mask(policy, snap.task_id);
        const Matrix logits = eval_logits(model, it->second, snap.task_id);
        StabilityEntry entry;
        entry.task_id = snap.task_id;
        entry.max_abs_deviation = max_abs_diff(logits, snap.logits);
        entry.bitwise_equal = logits.bitwise_equal(snap.logits);
        report.max_abs_deviation = std::max(report.max_abs_deviation, entry.max_abs_deviation);
        report.all_bitwise_equal = report.all_bitwise_equal && entry.bitwise_equal;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

SimilarityMatrix similarity_matrix(const ToyModel& model, bool normalize) {
    if (model.task_count() == 0) {
        throw Error("similarity matrix needs at least one learned task");
    }
    if (model.placed_layers().empty()) {
        throw Error("similarity matrix needs at least one placed layer");
    }
    SimilarityMatrix sim;
    const std::size_t n = model.task_count();
    for (const TaskHead& h : model.heads()) {
        sim.task_ids.push_back(h.task_id);
    }
    sim.values = Matrix(n, n);
    const double layers = static_cast<double>(model.placed_layers().size());
    for (std::size_t i = 0; i < n; ++i) {
        sim.values(i, i) = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            double total = 0.0;
            for (std::size_t layer : model.placed_layers()) {
                const BranchStack& stack = model.layer(layer);
                const LoraBranch* p = stack.find(sim.task_ids[i]);
                const LoraBranch* q = stack.find(sim.task_ids[j]);
                if (p == nullptr || q == nullptr) {
                    throw Error(fmt::format("layer {} is missing a branch for the similarity matrix", layer));
                }
                total += std::exp(-branch_distance(*p, *q, normalize));
            }
            sim.values(i, j) = total / layers;
            sim.values(j, i) = sim.values(i, j);
        }
    }
    return sim;
}

ModalityGap modality_gap(const ToyModel& model, const SimilarityMatrix& sim) {
    ModalityGap gap;
    double same = 0.0;
    double cross = 0.0;
    for (std::size_t i = 0; i < sim.task_ids.size(); ++i) {
        for (std::size_t j = i + 1; j < sim.task_ids.size(); ++j) {
            const bool same_modality =
                model.head(sim.task_ids[i]).modality_id == model.head(sim.task_ids[j]).modality_id;
            if (same_modality) {
                same += sim.values(i, j);
                ++gap.same_pairs;
            } else {
                cross += sim.values(i, j);
                ++gap.cross_pairs;
            }
        }
    }
    gap.mean_same = gap.same_pairs == 0 ? 0.0 : same / static_cast<double>(gap.same_pairs);
    gap.mean_cross = gap.cross_pairs == 0 ? 0.0 : cross / static_cast<double>(gap.cross_pairs);
    return gap;
}

void write_similarity_csv(const SimilarityMatrix& sim, const fs::path& path) {
    auto out = open_output(path);
    out << "task_id";
    for (const auto& id : sim.task_ids) {
        out << ',' << id;
    }
    out << '\n';
    for (std::size_t i = 0; i < sim.task_ids.size(); ++i) {
        out << sim.task_ids[i];
        for (std::size_t j = 0; j < sim.task_ids.size(); ++j) {
            out << ',' << fmt::format("{}", sim.values(i, j));
        }
        out << '\n';
    }
    finish_output(out, path);
}

std::vector<TaskAccuracy> accuracy_and_forgetting(ToyModel& model, const std::map<std::string, LabeledDataset>& datasets,
                                                  std::span<const StabilitySnapshot> snapshots, MaskPolicy policy) {
    std::vector<TaskAccuracy> out;
    for (const TaskHead& head : model.heads()) {
        auto snap = std::find_if(snapshots.begin(), snapshots.end(),
                                 [&](const StabilitySnapshot& s) { return s.task_id == head.task_id; });
        if (snap == snapshots.end()) {
            throw Error(fmt::format("missing snapshot for task '{}'", head.task_id));
        }
        auto data = datasets.find(head.task_id);
        if (data == datasets.end()) {
            throw Error(fmt::format("missing dataset for task '{}'", head.task_id));
        }
        model.apply_mask(policy, head.task_id);
        TaskAccuracy acc;
        acc.task_id = head.task_id;
        acc.accuracy_now = accuracy(model, data->second, data->second.test, head.task_id);
        acc.accuracy_after = snap->accuracy;
        acc.forgetting = acc.accuracy_after - acc.accuracy_now;
        out.push_back(std::move(acc));
    }
    return out;
}

void export_embeddings(ToyModel& model, std::span<const EmbeddingSource> sources, MaskPolicy policy,
                       const fs::path& path) {
    auto out = open_output(path);
    for (std::size_t r = 0; r < model.width(); ++r) {
        out << 'f' << r << ',';
    }
    out << "task_id,modality_id,split\n";
    for (const EmbeddingSource& src : sources) {
        const TaskHead& head = model.head(src.task_id);
        model.apply_mask(policy, src.task_id);
        Tape tape;
        ParamBinder binder(tape);
        const Matrix hidden = model_hidden(model, binder, tape.constant(src.data->features)).value();
        std::vector<char> is_test(src.data->size(), 0);
        for (std::size_t i : src.data->test) {
            is_test[i] = 1;
        }
        for (std::size_t c = 0; c < hidden.cols(); ++c) {
            for (std::size_t r = 0; r < hidden.rows(); ++r) {
                out << fmt::format("{}", hidden(r, c)) << ',';
            }
            out << head.task_id << ',' << head.modality_id << ',' << (is_test[c] ? "test" : "train") << '\n';
        }
    }
    finish_output(out, path);
}

void export_merged_deltas(const ToyModel& model, const fs::path& path) {
    auto out = open_output(path);
    out << "layer,row,col,value\n";
    for (std::size_t layer : model.placed_layers()) {
        const Matrix delta = model.layer(layer).merged_delta();
        for (std::size_t r = 0; r < delta.rows(); ++r) {
            for (std::size_t c = 0; c < delta.cols(); ++c) {
                out << layer << ',' << r << ',' << c << ',' << fmt::format("{}", delta(r, c)) << '\n';
            }
        }
    }
    finish_output(out, path);
}

json to_json(const Prop1Report& r) {
    return {{"layer", r.layer},
            {"task_id", r.task_id},
            {"dense_vs_base_max_abs", r.dense_vs_base},
            {"finite_difference_rel_error", r.fd_rel_error},
            {"tolerance", r.tolerance},
            {"fd_tolerance", r.fd_tolerance},
            {"passed", r.passed}};
}

json to_json(const StabilityReport& r) {
    json entries = json::array();
    for (const auto& e : r.entries) {
        entries.push_back(
            {{"task_id", e.task_id}, {"max_abs_deviation", e.max_abs_deviation}, {"bitwise_equal", e.bitwise_equal}});
    }
    return {{"entries", entries}, {"max_abs_deviation", r.max_abs_deviation}, {"all_bitwise_equal", r.all_bitwise_equal}};
}

json to_json(const SimilarityMatrix& s) {
    json rows = json::array();
    for (std::size_t i = 0; i < s.values.rows(); ++i) {
        json row = json::array();
        for (std::size_t j = 0; j < s.values.cols(); ++j) {
            row.push_back(s.values(i, j));
        }
        rows.push_back(std::move(row));
    }
    return {{"task_ids", s.task_ids}, {"values", rows}};
}

json to_json(const TaskAccuracy& a) {
    return {{"task_id", a.task_id},
            {"accuracy_now", a.accuracy_now},
            {"accuracy_after_training", a.accuracy_after},
            {"forgetting", a.forgetting}};
}

} // namespace mslora
