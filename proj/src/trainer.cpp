// SPDX-License-Identifier: Apache-2.0
#include "mslora/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <fmt/format.h>

#include "mslora/checkpoint.hpp"
#include "mslora/errors.hpp"
#include "mslora/metrics.hpp"
#include "mslora/rng.hpp"

namespace mslora {

using nlohmann::json;
namespace fs = std::filesystem;

void TaskSpec::validate() const {
    if (task_id.empty()) {
        throw ConfigError("task id must not be empty");
    }
    if (modality_id.empty()) {
        throw ConfigError(fmt::format("task '{}' needs a modality", task_id));
    }
    if (dataset_ref.empty()) {
        throw ConfigError(fmt::format("task '{}' needs a dataset reference", task_id));
    }
    if (class_count < 2) {
        throw ConfigError(fmt::format("task '{}' needs at least 2 classes", task_id));
    }
    if (steps == 0 || batch_size == 0) {
        throw ConfigError(fmt::format("task '{}' needs positive steps and batch size", task_id));
    }
    if (is_synth_ref(dataset_ref) && parse_synth_ref(dataset_ref).class_count != class_count) {
        throw ConfigError(fmt::format("task '{}' declares {} classes but its generator spec has {}", task_id,
                                      class_count, parse_synth_ref(dataset_ref).class_count));
    }
}

void validate_sequence(std::span<const TaskSpec> tasks) {
    std::set<std::string> ids;
    for (const TaskSpec& t : tasks) {
        t.validate();
        if (!ids.insert(t.task_id).second) {
            throw ConfigError(fmt::format("duplicate task id '{}'", t.task_id));
        }
    }
}

void RunConfig::validate() const {
    if (model.depth == 0 || model.width < 2) {
        throw ConfigError("model needs depth >= 1 and width >= 2");
    }
    model.placement.layers(model.depth);
    if (rank == 0 || rank > model.width) {
        throw ConfigError(fmt::format("rank {} must be in [1, {}]", rank, model.width));
    }
    if (!(lora_alpha > 0.0) || !std::isfinite(lora_alpha)) {
        throw ConfigError("lora alpha must be positive");
    }
    weights.validate();
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("learning rate must be positive");
    }
    if (!(warmup_ratio >= 0.0 && warmup_ratio <= 0.5)) {
        throw ConfigError(fmt::format("warmup ratio {} must be in [0, 0.5]", warmup_ratio));
    }
    if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
        throw ConfigError("optimizer betas must be in [0, 1)");
    }
    if (!(optimizer.epsilon > 0.0)) {
        throw ConfigError("optimizer epsilon must be positive");
    }
    if (optimizer.weight_decay != 0.0) {
        throw ConfigError("weight decay is fixed at 0");
    }
}

std::string branch_param_name(std::size_t layer, std::string_view task_id, char which) {
    return fmt::format("layer{}.{}.{}", layer, task_id, which);
}

std::string head_param_name(std::string_view task_id, char which) {
    return fmt::format("head.{}.{}", task_id, which);
}

std::uint64_t dataset_split_seed(std::uint64_t run_seed, std::string_view task_id) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : task_id) {
        h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
    }
    return derive_seed(run_seed, h);
}

ContinualTrainer::ContinualTrainer(RunConfig config) : config_(std::move(config)), optimizer_(config_.optimizer) {
    config_.validate();
}

LabeledDataset ContinualTrainer::load_dataset(const TaskSpec& task) const {
    LabeledDataset data = resolve_dataset(task.dataset_ref, config_.model.width,
                                          dataset_split_seed(config_.seed, task.task_id));
    if (data.class_count != task.class_count) {
        throw ConfigError(fmt::format("task '{}' declares {} classes, dataset has {}", task.task_id, task.class_count,
                                      data.class_count));
    }
    if (data.train.empty() || data.test.empty()) {
        throw Error(fmt::format("dataset for task '{}' has an empty split", task.task_id));
    }
    return data;
}

TaskReport ContinualTrainer::train_task(ToyModel& model, const TaskSpec& task, const LabeledDataset& data,
                                        const ModalityPartition& partition) {
    if (partition.current != task.task_id) {
        throw Error(fmt::format("partition is for '{}', training '{}'", partition.current, task.task_id));
    }
    for (std::size_t layer : model.placed_layers()) {
        const auto branches = model.layer(layer).branches();
        const auto unfrozen = std::count_if(branches.begin(), branches.end(), [](const LoraBranch& b) { return !b.frozen; });
        const LoraBranch* own = model.layer(layer).find(task.task_id);
        if (unfrozen != 1 || own == nullptr || own->frozen) {
            throw Error(fmt::format("layer {} must hold exactly one unfrozen branch, owned by '{}'", layer,
                                    task.task_id));
        }
    }
    TaskHead& head = model.head(task.task_id);
    if (head.frozen) {
        throw Error(fmt::format("head for '{}' is already frozen", task.task_id));
    }

    model.apply_mask(MaskPolicy::prefix, task.task_id);
    optimizer_ = AdamW(config_.optimizer);

    std::vector<ParamSlot> slots;
    for (std::size_t layer : model.placed_layers()) {
        LoraBranch* branch = model.layer(layer).find(task.task_id);
        slots.push_back({branch_param_name(layer, task.task_id, 'a'), &branch->a, nullptr});
        slots.push_back({branch_param_name(layer, task.task_id, 'b'), &branch->b, nullptr});
    }
    slots.push_back({head_param_name(task.task_id, 'w'), &head.weight, nullptr});
    slots.push_back({head_param_name(task.task_id, 'b'), &head.bias, nullptr});

    TaskReport report;
    report.task_id = task.task_id;
    report.modality_id = task.modality_id;
    report.steps = task.steps;
    report.trainable_parameters = model.trainable_parameter_count();
    report.trace.reserve(task.steps);

    CounterRng batch_rng(derive_seed(config_.seed, 0x62617463680000ULL + model.task_index(task.task_id)));
    std::vector<std::size_t> batch(task.batch_size);

    for (std::size_t step = 0; step < task.steps; ++step) {
        for (std::size_t& idx : batch) {
            idx = data.train[batch_rng.below(data.train.size())];
        }
        Tape tape;
        ParamBinder binder(tape);
        const auto labels = data.gather_labels(batch);
        Var logits = model_forward(model, binder, tape.constant(data.gather(batch)), task.task_id);
        Var ce = softmax_cross_entropy(logits, labels);
        Var cr = cr_loss(binder, model, partition, config_.regularizers);
        Var ortho = ortho_loss(binder, model, task.task_id);
        Var total = total_loss(ce, cr, ortho, config_.weights);

        const StepTrace trace{step, ce.scalar(), cr.scalar(), ortho.scalar(), total.scalar(),
                              lr_at(step, task.steps, config_.learning_rate, config_.warmup_ratio)};
        if (!std::isfinite(trace.total)) {
            throw NumericError(fmt::format("non-finite loss at step {} of task '{}' (ce={}, cr={}, ortho={})", step,
                                           task.task_id, trace.ce, trace.cr, trace.ortho));
        }
        tape.backward(total);
        for (ParamSlot& slot : slots) {
            slot.grad = binder.grad(*slot.value);
            if (slot.grad == nullptr) {
                throw Error(fmt::format("parameter '{}' is not on the training tape", slot.name));
            }
        }
        optimizer_.step(slots, trace.lr);
        report.trace.push_back(trace);
    }

    report.final_train_loss = report.trace.empty() ? 0.0 : report.trace.back().total;
    report.train_accuracy = accuracy(model, data, data.train, task.task_id);
    report.test_accuracy = accuracy(model, data, data.test, task.task_id);
    return report;
}

RunResult ContinualTrainer::run_sequence(ToyModel& model, std::span<const TaskSpec> tasks, const RunOptions& options) {
    validate_sequence(tasks);
    RunResult result;
    result.snapshots = options.prior_snapshots;

    for (std::size_t k = 0; k < tasks.size(); ++k) {
        const TaskSpec& task = tasks[k];
        if (model.has_task(task.task_id)) {
            if (!model.head(task.task_id).frozen) {
                throw Error(fmt::format("task '{}' is present but unfinished; cannot resume mid-task", task.task_id));
            }
            continue;
        }
        const LabeledDataset data = load_dataset(task);

        TaskHead info;
        info.task_id = task.task_id;
        info.modality_id = task.modality_id;
        info.class_count = task.class_count;
        info.dataset_ref = task.dataset_ref;
        info.split_seed = dataset_split_seed(config_.seed, task.task_id);
        model.begin_task(info, config_.rank, config_.branch_scale(), derive_seed(config_.seed, 0x7461736bULL + k));

        const ModalityPartition partition = ModalityPartition::from_model(model, task.task_id);
        TaskReport report;
        try {
            report = train_task(model, task, data, partition);
        } catch (const NumericError&) {
            if (options.diagnostic_dir) {
                save_checkpoint(model, result.snapshots, &optimizer_, *options.diagnostic_dir);
            }
            throw;
        }
        model.freeze_task(task.task_id);
        result.snapshots.push_back(capture_snapshot(model, data, task.task_id, config_.mask_policy));

        if (options.checkpoint_root) {
            save_checkpoint(model, result.snapshots, nullptr,
                            *options.checkpoint_root / fmt::format("task_{}", model.task_count()));
        }
        result.tasks.push_back(report);
        if (options.on_task_done) {
            options.on_task_done(result.tasks.back());
        }
    }
    return result;
}

json to_json(const RunConfig& c) {
    return {
        {"model", {{"depth", c.model.depth}, {"width", c.model.width}, {"placement", c.model.placement.to_string()}}},
        {"lora", {{"rank", c.rank}, {"alpha", c.lora_alpha}}},
        {"loss",
         {{"alpha", c.weights.alpha},
          {"beta", c.weights.beta},
          {"cr.reduce", std::string(to_string(c.regularizers.reduce))},
          {"similarity.normalize", c.regularizers.normalize_similarity}}},
        {"optimizer",
         {{"lr", c.learning_rate},
          {"betas", {c.optimizer.beta1, c.optimizer.beta2}},
          {"epsilon", c.optimizer.epsilon},
          {"weight_decay", c.optimizer.weight_decay},
          {"warmup_ratio", c.warmup_ratio}}},
        {"mask_policy", std::string(to_string(c.mask_policy))},
        {"seed", c.seed},
        {"determinism", c.determinism},
    };
}

json to_json(const TaskSpec& t) {
    return {{"task_id", t.task_id},     {"modality_id", t.modality_id}, {"dataset_ref", t.dataset_ref},
            {"classes", t.class_count}, {"steps", t.steps},             {"batch_size", t.batch_size}};
}

json to_json(const TaskReport& r) {
    json trace = json::object();
    std::vector<double> ce, cr, ortho, total, lr;
    for (const StepTrace& s : r.trace) {
        ce.push_back(s.ce);
        cr.push_back(s.cr);
        ortho.push_back(s.ortho);
        total.push_back(s.total);
        lr.push_back(s.lr);
    }
    trace["ce"] = ce;
    trace["cr"] = cr;
    trace["ortho"] = ortho;
    trace["total"] = total;
    trace["lr"] = lr;
    return {{"task_id", r.task_id},
            {"modality_id", r.modality_id},
            {"steps", r.steps},
            {"trainable_parameters", r.trainable_parameters},
            {"final_train_loss", r.final_train_loss},
            {"train_accuracy", r.train_accuracy},
            {"test_accuracy", r.test_accuracy},
            {"trace", trace}};
}

void write_trace_csv(std::span<const TaskReport> reports, const fs::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw Error(fmt::format("cannot write {}", path.string()));
    }
    out << "step,ce,cr,ortho,total,lr\n";
    std::size_t global = 0;
    for (const TaskReport& r : reports) {
        for (const StepTrace& s : r.trace) {
            out << fmt::format("{},{},{},{},{},{}\n", global++, s.ce, s.cr, s.ortho, s.total, s.lr);
        }
    }
    if (!out) {
        throw Error(fmt::format("write failed for {}", path.string()));
    }
}

} // namespace mslora
