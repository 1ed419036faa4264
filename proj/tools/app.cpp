// SPDX-License-Identifier: Apache-2.0
#include "app.hpp"

#include <charconv>
#include <fstream>
#include <future>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "mslora/checkpoint.hpp"
#include "mslora/errors.hpp"
#include "mslora/gradcheck.hpp"
#include "mslora/regularizers.hpp"
#include "mslora/rng.hpp"
#include "mslora/taskgen.hpp"

namespace mslora::app {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error(fmt::format("cannot write {}", path.string()));
    }
    out << text;
    if (!out) {
        throw Error(fmt::format("write to {} failed", path.string()));
    }
}

std::vector<std::string> split(std::string_view text, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const auto pos = text.find(sep, start);
        std::string_view piece = text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
        while (!piece.empty() && (piece.front() == ' ' || piece.front() == '\t')) {
            piece.remove_prefix(1);
        }
        while (!piece.empty() && (piece.back() == ' ' || piece.back() == '\t')) {
            piece.remove_suffix(1);
        }
        parts.emplace_back(piece);
        if (pos == std::string_view::npos) {
            break;
        }
        start = pos + 1;
    }
    return parts;
}

template <typename T>
T parse_number(const std::string& text, std::string_view what) {
    T value{};
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw ConfigError(fmt::format("invalid {} '{}'", what, text));
    }
    return value;
}

std::size_t model_rank(const ToyModel& model, std::size_t fallback) {
    for (std::size_t layer : model.placed_layers()) {
        for (const LoraBranch& b : model.layer(layer).branches()) {
            return b.rank;
        }
    }
    return fallback;
}

/// Checkpoint directory named by `target`: a checkpoint itself, a run directory or a checkpoint root.
std::optional<fs::path> find_checkpoint(const fs::path& target) {
    if (fs::exists(target / "manifest.json")) {
        return target;
    }
    if (auto latest = latest_checkpoint(target / "checkpoints")) {
        return latest;
    }
    return latest_checkpoint(target);
}

std::string csv_cell(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string quoted = "\"";
    for (char c : s) {
        if (c == '"') {
            quoted += '"';
        }
        quoted += c == '\n' ? ' ' : c;
    }
    return quoted + '"';
}

struct RunStatus {
    int code = exit_ok;
    std::string error;
};

RunStatus train_into(ExperimentConfig config, const fs::path& dir, bool resume, std::ostream& out,
                     ExperimentOutcome* keep) {
    config.output_dir = dir;
    try {
        fs::create_directories(dir);
        write_text(dir / "config.echo", render_config(config));

        const fs::path checkpoints = dir / "checkpoints";
        RunOptions options;
        options.checkpoint_root = checkpoints;
        options.diagnostic_dir = dir / "diagnostic";
        json earlier_tasks = json::array();
        ToyModel model;
        std::optional<fs::path> latest = resume ? latest_checkpoint(checkpoints) : std::nullopt;
        if (latest) {
            Checkpoint cp = load_checkpoint(*latest);
            const ModelShape& shape = config.run.model;
            if (cp.model.width() != shape.width || cp.model.depth() != shape.depth ||
                cp.model.placement().to_string() != shape.placement.to_string()) {
                throw ConfigError(fmt::format("checkpoint {} does not match the configured model shape",
                                              latest->string()));
            }
            model = std::move(cp.model);
            options.prior_snapshots = std::move(cp.snapshots);
            out << fmt::format("resuming from {} ({} tasks done)\n", latest->string(), model.task_count());
            if (fs::exists(dir / "report.json")) {
                std::ifstream in(dir / "report.json");
                const json previous = json::parse(in, nullptr, false);
                if (previous.is_object() && previous.contains("tasks")) {
                    for (const json& t : previous.at("tasks")) {
                        if (model.has_task(t.value("task_id", ""))) {
                            earlier_tasks.push_back(t);
                        }
                    }
                }
            }
        } else {
            fs::remove_all(checkpoints);
            fs::remove_all(dir / "diagnostic");
            model = initial_model(config);
        }
        options.on_task_done = [&out](const TaskReport& r) {
            out << fmt::format("task {} ({}): {} steps, train accuracy {:.4f}, test accuracy {:.4f}\n", r.task_id,
                               r.modality_id, r.steps, r.train_accuracy, r.test_accuracy);
        };

        ExperimentOutcome outcome = run_experiment(config, std::move(model), options);

        json tasks = earlier_tasks;
        for (const TaskReport& r : outcome.result.tasks) {
            tasks.push_back(to_json(r));
        }
        json spec = json::array();
        for (const TaskSpec& t : config.tasks) {
            spec.push_back(to_json(t));
        }
        json accuracy = json::array();
        for (const TaskAccuracy& a : outcome.accuracy) {
            accuracy.push_back(to_json(a));
        }
        json report = {
            {"status", "ok"},
            {"config", {{"run", to_json(config.run)}, {"tasks", spec}}},
            {"tasks", tasks},
            {"stability", to_json(outcome.stability)},
            {"accuracy", accuracy},
            {"similarity", to_json(outcome.similarity)},
            {"modality_gap",
             {{"mean_same", outcome.gap.mean_same},
              {"mean_cross", outcome.gap.mean_cross},
              {"same_pairs", outcome.gap.same_pairs},
              {"cross_pairs", outcome.gap.cross_pairs},
              {"gap", outcome.gap.gap()}}},
            {"last_task", outcome.last_task},
            {"last_ortho", outcome.last_ortho},
        };
        write_text(dir / "report.json", report.dump(2) + "\n");
        if (!outcome.result.tasks.empty() || !fs::exists(dir / "trace.csv")) {
            write_trace_csv(outcome.result.tasks, dir / "trace.csv");
        }
        fs::create_directories(dir / "exports");
        write_similarity_csv(outcome.similarity, dir / "exports" / "similarity.csv");
        if (keep != nullptr) {
            *keep = std::move(outcome);
        }
        return {};
    } catch (const ConfigError& e) {
        return {exit_config, e.what()};
    } catch (const NumericError& e) {
        return {exit_runtime, e.what()};
    } catch (const std::exception& e) {
        return {exit_runtime, e.what()};
    }
}

} // namespace

ToyModel initial_model(const ExperimentConfig& config) {
    return ToyModel::build(config.run.model, derive_seed(config.run.seed, 0x62617365ULL));
}

ExperimentOutcome run_experiment(const ExperimentConfig& config, ToyModel model, const RunOptions& options) {
    ContinualTrainer trainer(config.run);
    RunResult result = trainer.run_sequence(model, config.tasks, options);
    return evaluate_model(config, std::move(model), std::move(result));
}

ExperimentOutcome evaluate_model(const ExperimentConfig& config, ToyModel model, RunResult result) {
    ExperimentOutcome o;
    o.model = std::move(model);
    o.result = std::move(result);

    std::map<std::string, Matrix> inputs;
    for (const StabilitySnapshot& s : o.result.snapshots) {
        inputs[s.task_id] = s.inputs;
    }
    o.stability = stability_replay(o.model, o.result.snapshots, inputs, config.run.mask_policy);

    ContinualTrainer trainer(config.run);
    std::map<std::string, LabeledDataset> datasets;
    for (const TaskSpec& t : config.tasks) {
        if (o.model.has_task(t.task_id)) {
            datasets.emplace(t.task_id, trainer.load_dataset(t));
        }
    }
    o.accuracy = accuracy_and_forgetting(o.model, datasets, o.result.snapshots, config.run.mask_policy);
    o.similarity = similarity_matrix(o.model, config.run.regularizers.normalize_similarity);
    o.gap = modality_gap(o.model, o.similarity);
    o.last_task = o.model.heads().back().task_id;
    Tape tape;
    ParamBinder binder(tape);
    o.last_ortho = ortho_loss(binder, o.model, o.last_task).scalar();
    return o;
}

ToyModel with_probe_task(const ToyModel& model, std::size_t rank, std::uint64_t seed) {
    ToyModel m = model;
    std::vector<std::string> unfinished;
    for (const TaskHead& h : m.heads()) {
        if (!h.frozen) {
            unfinished.push_back(h.task_id);
        }
    }
    for (const std::string& id : unfinished) {
        m.freeze_task(id);
    }
    std::string id = "probe";
    for (std::size_t k = 1; m.has_task(id); ++k) {
        id = fmt::format("probe{}", k);
    }
    TaskHead info;
    info.task_id = id;
    info.modality_id = m.task_count() > 0 ? m.heads()[0].modality_id : "probe";
    info.class_count = 3;
    info.dataset_ref = "probe";
    m.begin_task(info, rank, 1.0, seed);
    CounterRng rng(derive_seed(seed, 1));
    for (std::size_t layer : m.placed_layers()) {
        LoraBranch* b = m.layer(layer).find(id);
        b->a = gaussian_matrix(rng, b->a.rows(), b->a.cols(), 0.3);
        b->b = gaussian_matrix(rng, b->b.rows(), b->b.cols(), 0.3);
    }
    return m;
}

SuiteResult prop1_suite(const ToyModel& model, std::size_t rank, const LossWeights& weights,
                        const RegularizerOptions& options, std::uint64_t seed) {
    const ToyModel probe = with_probe_task(model, rank, seed);
    const std::string task = probe.heads().back().task_id;
    const ModalityPartition partition = ModalityPartition::from_model(probe, task);

    CounterRng rng(derive_seed(seed, 2));
    constexpr std::size_t batch = 8;
    const Matrix inputs = gaussian_matrix(rng, probe.width(), batch, 1.0);
    std::vector<std::size_t> labels(batch);
    for (auto& l : labels) {
        l = rng.below(probe.head(task).class_count);
    }

    const LossBuilder ce_only = [&](ParamBinder&, const ToyModel&, Var logits) {
        return softmax_cross_entropy(logits, labels);
    };
    const LossBuilder full = [&](ParamBinder& binder, const ToyModel& m, Var logits) {
        Var ce = softmax_cross_entropy(logits, labels);
        return total_loss(ce, cr_loss(binder, m, partition, options), ortho_loss(binder, m, task), weights);
    };

    SuiteResult result{"prop1", true, json::array()};
    for (const auto& [name, loss] : {std::pair{"ce", &ce_only}, std::pair{"full", &full}}) {
        for (std::size_t layer : probe.placed_layers()) {
            const Prop1Report r = verify_prop1(probe, layer, *loss, inputs);
            json entry = to_json(r);
            entry["loss"] = name;
            entry["rank"] = rank;
            result.detail.push_back(std::move(entry));
            result.passed = result.passed && r.passed;
        }
    }
    return result;
}

SuiteResult stability_suite(ToyModel& model, const std::vector<StabilitySnapshot>& snapshots) {
    if (snapshots.empty()) {
        return {"stability", true, to_json(StabilityReport{})};
    }
    std::map<std::string, Matrix> inputs;
    for (const StabilitySnapshot& s : snapshots) {
        inputs[s.task_id] = s.inputs;
    }
    const StabilityReport r = stability_replay(model, snapshots, inputs, snapshots.front().policy);
    return {"stability", r.all_bitwise_equal, to_json(r)};
}

SuiteResult grads_suite(std::size_t instances) {
    BatteryOptions options;
    options.instances = instances;
    SuiteResult result{"grads", true, json::array()};
    for (const BatteryEntry& e : run_gradient_battery(options)) {
        result.detail.push_back(to_json(e));
        result.passed = result.passed && e.passed;
    }
    return result;
}

std::optional<fs::path> latest_checkpoint(const fs::path& root) {
    std::error_code ec;
    if (!fs::is_directory(root, ec)) {
        return std::nullopt;
    }
    std::optional<fs::path> best;
    std::size_t best_k = 0;
    for (const auto& entry : fs::directory_iterator(root)) {
        const std::string name = entry.path().filename().string();
        if (!name.starts_with("task_") || !fs::exists(entry.path() / "manifest.json")) {
            continue;
        }
        std::size_t k = 0;
        const char* first = name.data() + 5;
        const char* last = name.data() + name.size();
        auto [ptr, err] = std::from_chars(first, last, k);
        if (err != std::errc{} || ptr != last) {
            continue;
        }
        if (!best || k > best_k) {
            best = entry.path();
            best_k = k;
        }
    }
    return best;
}

ExperimentConfig apply_sweep_value(const ExperimentConfig& base, const std::string& axis, const std::string& value) {
    ExperimentConfig c = base;
    try {
        if (axis == "rank") {
            const auto r = parse_number<std::size_t>(value, "rank");
            c.run.rank = r;
            c.run.lora_alpha = static_cast<double>(r);
        } else if (axis == "weights") {
            const auto parts = split(value, ':');
            if (parts.size() != 2) {
                throw ConfigError(fmt::format("weights value '{}' must be alpha:beta", value));
            }
            c.run.weights.alpha = parse_number<double>(parts[0], "alpha");
            c.run.weights.beta = parse_number<double>(parts[1], "beta");
        } else if (axis == "placement") {
            c.run.model.placement = Placement::parse(value);
        } else if (axis == "order") {
            const auto ids = split(value, ':');
            std::map<std::string, TaskSpec> by_id;
            for (const TaskSpec& t : base.tasks) {
                by_id.emplace(t.task_id, t);
            }
            std::set<std::string> used;
            c.tasks.clear();
            for (const std::string& id : ids) {
                auto it = by_id.find(id);
                if (it == by_id.end() || !used.insert(id).second) {
                    throw ConfigError(fmt::format("order '{}' is not a permutation of the configured tasks", value));
                }
                c.tasks.push_back(it->second);
            }
            if (c.tasks.size() != base.tasks.size()) {
                throw ConfigError(fmt::format("order '{}' is not a permutation of the configured tasks", value));
            }
        } else {
            throw ConfigError(fmt::format("unknown sweep axis '{}'", axis));
        }
        c.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    return c;
}

int cmd_train(const fs::path& config_path, const std::optional<fs::path>& output, bool resume, std::ostream& out,
              std::ostream& err) {
    ExperimentConfig config;
    try {
        config = load_config(config_path);
    } catch (const Error& e) {
        err << "config error: " << e.what() << '\n';
        return exit_config;
    }
    const fs::path dir = output ? *output : config.output_dir;
    const RunStatus status = train_into(config, dir, resume, out, nullptr);
    if (status.code != exit_ok) {
        err << (status.code == exit_config ? "config error: " : "error: ") << status.error << '\n';
    }
    return status.code;
}

int cmd_verify(const fs::path& target, const std::string& suite, std::ostream& out, std::ostream& err) {
    static const std::set<std::string> suites = {"prop1", "stability", "grads", "all"};
    if (!suites.contains(suite)) {
        err << fmt::format("unknown suite '{}'\n", suite);
        return exit_config;
    }
    const bool want_model = suite != "grads";
    ToyModel model;
    std::vector<StabilitySnapshot> snapshots;
    std::size_t rank = RunConfig{}.rank;
    LossWeights weights;
    RegularizerOptions reg;
    std::uint64_t seed = 0;
    try {
        if (fs::is_directory(target)) {
            const auto dir = find_checkpoint(target);
            if (!dir) {
                err << fmt::format("no checkpoint found under {}\n", target.string());
                return exit_config;
            }
            Checkpoint cp = load_checkpoint(*dir);
            model = std::move(cp.model);
            snapshots = std::move(cp.snapshots);
            rank = model_rank(model, rank);
        } else {
            const ExperimentConfig config = load_config(target);
            rank = config.run.rank;
            weights = config.run.weights;
            reg = config.run.regularizers;
            seed = config.run.seed;
            if (want_model) {
                ExperimentOutcome o = run_experiment(config, initial_model(config));
                model = std::move(o.model);
                snapshots = std::move(o.result.snapshots);
            }
        }
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_runtime;
    }

    json report = json::object();
    bool passed = true;
    auto run = [&](const std::string& name, auto&& fn) {
        if (suite != "all" && suite != name) {
            return;
        }
        try {
            SuiteResult r = fn();
            report[name] = {{"passed", r.passed}, {"detail", std::move(r.detail)}};
            passed = passed && r.passed;
        } catch (const std::exception& e) {
            report[name] = {{"passed", false}, {"error", e.what()}};
            passed = false;
        }
        err << fmt::format("{}: {}\n", name, report[name]["passed"].get<bool>() ? "pass" : "FAIL");
    };
    run("prop1", [&] { return prop1_suite(model, rank, weights, reg, derive_seed(seed, 0x70726f6265ULL)); });
    run("stability", [&] { return stability_suite(model, snapshots); });
    run("grads", [&] { return grads_suite(); });
    report["passed"] = passed;
    out << report.dump(2) << '\n';
    return passed ? exit_ok : exit_verification;
}

int cmd_sweep(const fs::path& config_path, const std::string& axis, const std::vector<std::string>& values,
              const std::optional<fs::path>& output, bool parallel, std::ostream& out, std::ostream& err) {
    ExperimentConfig base;
    std::vector<std::string> items;
    std::vector<ExperimentConfig> configs;
    try {
        base = load_config(config_path);
        for (const std::string& v : values) {
            for (std::string& piece : split(v, ',')) {
                if (!piece.empty()) {
                    items.push_back(std::move(piece));
                }
            }
        }
        if (items.empty()) {
            throw ConfigError("the sweep has no values");
        }
        for (const std::string& item : items) {
            configs.push_back(apply_sweep_value(base, axis, item));
        }
    } catch (const Error& e) {
        err << "config error: " << e.what() << '\n';
        return exit_config;
    }

    const fs::path dir = output ? *output : base.output_dir / fmt::format("sweep_{}", axis);
    struct Row {
        RunStatus status;
        ExperimentOutcome outcome;
        std::string log;
    };
    std::vector<Row> rows(items.size());
    try {
        fs::create_directories(dir);
        write_text(dir / "config.echo", render_config(base));
        json meta = {{"axis", axis}, {"values", items}, {"parallel", parallel}};
        if (parallel) {
            meta["warning"] = "runs executed concurrently; per-run results are seeded identically to a serial sweep";
        }
        write_text(dir / "sweep.json", meta.dump(2) + "\n");
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_runtime;
    }

    auto run_one = [&](std::size_t i) {
        std::ostringstream log;
        rows[i].status = train_into(configs[i], dir / fmt::format("{}_{}", axis, i), false, log, &rows[i].outcome);
        rows[i].log = log.str();
    };
    if (parallel) {
        std::vector<std::future<void>> jobs;
        for (std::size_t i = 0; i < items.size(); ++i) {
            jobs.push_back(std::async(std::launch::async, run_one, i));
        }
        for (auto& j : jobs) {
            j.get();
        }
    } else {
        for (std::size_t i = 0; i < items.size(); ++i) {
            run_one(i);
        }
    }

    std::string csv = "axis,value,status,error,tasks,mean_test_accuracy,min_test_accuracy,max_forgetting,"
                      "same_modality_similarity,cross_modality_similarity,modality_gap,last_ortho,"
                      "trainable_parameters,task_accuracies\n";
    int code = exit_ok;
    for (std::size_t i = 0; i < items.size(); ++i) {
        const Row& row = rows[i];
        out << fmt::format("[{} = {}]\n{}", axis, items[i], row.log);
        if (row.status.code != exit_ok) {
            err << fmt::format("{} = {}: {}\n", axis, items[i], row.status.error);
            csv += fmt::format("{},{},failed,{},,,,,,,,,,\n", axis, csv_cell(items[i]), csv_cell(row.status.error));
            code = std::max(code, row.status.code);
            continue;
        }
        const ExperimentOutcome& o = row.outcome;
        double mean = 0.0;
        double min = 1.0;
        double forgetting = 0.0;
        std::string per_task;
        for (const TaskAccuracy& a : o.accuracy) {
            mean += a.accuracy_now;
            min = std::min(min, a.accuracy_now);
            forgetting = std::max(forgetting, a.forgetting);
            per_task += fmt::format("{}{}={:.4f}", per_task.empty() ? "" : ";", a.task_id, a.accuracy_now);
        }
        mean /= static_cast<double>(o.accuracy.size());
        const std::size_t trainable =
            o.result.tasks.empty() ? 0 : o.result.tasks.back().trainable_parameters;
        csv += fmt::format("{},{},ok,,{},{:.6f},{:.6f},{:.6g},{:.6f},{:.6f},{:.6f},{:.6g},{},{}\n", axis,
                           csv_cell(items[i]), o.accuracy.size(), mean, min, forgetting, o.gap.mean_same,
                           o.gap.mean_cross, o.gap.gap(), o.last_ortho, trainable, per_task);
    }
    try {
        write_text(dir / fmt::format("sweep_{}.csv", axis), csv);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_runtime;
    }
    out << csv;
    return code;
}

int cmd_export(const fs::path& checkpoint, const std::string& what, const fs::path& path, bool force,
               std::ostream& out, std::ostream& err) {
    if (what != "sim" && what != "embeddings" && what != "delta") {
        err << fmt::format("unknown export '{}' (expected sim, embeddings or delta)\n", what);
        return exit_config;
    }
    if (fs::exists(path) && !force) {
        err << fmt::format("{} already exists; pass --force to overwrite\n", path.string());
        return exit_config;
    }
    try {
        const auto dir = find_checkpoint(checkpoint);
        if (!dir) {
            err << fmt::format("no checkpoint found under {}\n", checkpoint.string());
            return exit_config;
        }
        Checkpoint cp = load_checkpoint(*dir);
        if (path.has_parent_path()) {
            fs::create_directories(path.parent_path());
        }
        if (what == "sim") {
            write_similarity_csv(similarity_matrix(cp.model), path);
        } else if (what == "delta") {
            export_merged_deltas(cp.model, path);
        } else {
            std::vector<LabeledDataset> datasets;
            datasets.reserve(cp.model.task_count());
            for (const TaskHead& h : cp.model.heads()) {
                datasets.push_back(resolve_dataset(h.dataset_ref, cp.model.width(), h.split_seed));
            }
            std::vector<EmbeddingSource> sources;
            for (std::size_t k = 0; k < datasets.size(); ++k) {
                sources.push_back({cp.model.heads()[k].task_id, &datasets[k]});
            }
            const MaskPolicy policy = cp.snapshots.empty() ? MaskPolicy::prefix : cp.snapshots.front().policy;
            export_embeddings(cp.model, sources, policy, path);
        }
        out << fmt::format("wrote {}\n", path.string());
        return exit_ok;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_runtime;
    }
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Masked multi-branch LoRA continual learning on a toy MLP"};
    app.require_subcommand(1);

    std::string config;
    std::string output;
    bool resume = false;
    auto* train = app.add_subcommand("train", "Train the task sequence of a config");
    train->add_option("config", config, "Experiment config file")->required();
    train->add_option("--output,-o", output, "Run directory (defaults to the config's runtime.output)");
    train->add_flag("--resume", resume, "Continue from the latest checkpoint in the run directory");

    std::string target;
    std::string suite = "all";
    auto* verify = app.add_subcommand("verify", "Check gradient equivalence, stability and gradients");
    verify->add_option("target", target, "Config file, run directory or checkpoint")->required();
    verify->add_option("--suite", suite, "prop1, stability, grads or all")
        ->check(CLI::IsMember({"prop1", "stability", "grads", "all"}));

    std::string axis;
    std::vector<std::string> values;
    bool parallel = false;
    auto* sweep = app.add_subcommand("sweep", "Run one sequence per value of an ablation axis");
    sweep->add_option("config", config, "Experiment config file")->required();
    sweep->add_option("--axis", axis, "rank, weights, placement or order")
        ->required()
        ->check(CLI::IsMember({"rank", "weights", "placement", "order"}));
    sweep->add_option("--values", values, "Comma-separated values")->expected(0, -1);
    sweep->add_option("--output,-o", output, "Sweep directory");
    sweep->add_flag("--parallel", parallel, "Run the values concurrently");

    std::string checkpoint;
    std::string what;
    std::string out_path;
    bool force = false;
    auto* exp = app.add_subcommand("export", "Write a CSV artifact from a checkpoint");
    exp->add_option("checkpoint", checkpoint, "Checkpoint or run directory")->required();
    exp->add_option("--what", what, "sim, embeddings or delta")
        ->required()
        ->check(CLI::IsMember({"sim", "embeddings", "delta"}));
    exp->add_option("--out", out_path, "Output CSV path")->required();
    exp->add_flag("--force", force, "Overwrite an existing output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? exit_ok : exit_config;
    }

    const std::optional<fs::path> out_dir = output.empty() ? std::nullopt : std::optional<fs::path>(output);
    if (train->parsed()) {
        return cmd_train(config, out_dir, resume, out, err);
    }
    if (verify->parsed()) {
        return cmd_verify(target, suite, out, err);
    }
    if (sweep->parsed()) {
        return cmd_sweep(config, axis, values, out_dir, parallel, out, err);
    }
    return cmd_export(checkpoint, what, out_path, force, out, err);
}

} // namespace mslora::app
