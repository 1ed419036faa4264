// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <fstream>
#include <iterator>

#include "mslora/checkpoint.hpp"
#include "mslora/errors.hpp"
#include "mslora/metrics.hpp"
#include "mslora/taskgen.hpp"
#include "mslora/trainer.hpp"
#include "oracles.hpp"

using namespace mslora;
namespace fs = std::filesystem;

namespace {

std::vector<TaskSpec> sequence(std::size_t steps) {
    return {
        {"a1", "m1", "synth:101:1:4", 4, steps, 32},
        {"b1", "m2", "synth:202:2:4", 4, steps, 32},
        {"a2", "m1", "synth:101:3:4", 4, steps, 32},
    };
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

TEST_SUITE("trainer") {

TEST_CASE("single task without regularizers learns a separable task") {
    RunConfig cfg;
    cfg.weights = {0.0, 0.0};
    ContinualTrainer trainer(cfg);
    ToyModel model = ToyModel::build(cfg.model, 1);
    const std::vector<TaskSpec> tasks = {{"only", "m", "synth:7:1:2", 2, 300, 32}};
    const RunResult r = trainer.run_sequence(model, tasks);
    REQUIRE(r.tasks.size() == 1);
    CHECK(r.tasks[0].train_accuracy >= 0.95);
    CHECK(r.tasks[0].trace.size() == 300);
    for (const StepTrace& s : r.tasks[0].trace) {
        CHECK(s.cr == 0.0);
        CHECK(s.total == s.ce);
    }
}

TEST_CASE("sequence structure, traces and the freeze contract") {
    RunConfig cfg;
    ContinualTrainer trainer(cfg);
    ToyModel model = ToyModel::build(cfg.model, 2);
    const auto tasks = sequence(100);

    // Train the first task, record hashes of its parameters, then train the rest.
    const std::vector<TaskSpec> first(tasks.begin(), tasks.begin() + 1);
    trainer.run_sequence(model, first);
    std::vector<std::uint64_t> hashes;
    for (std::size_t l : model.placed_layers()) {
        hashes.push_back(content_hash(model.layer(l).find("a1")->a));
        hashes.push_back(content_hash(model.layer(l).find("a1")->b));
        hashes.push_back(content_hash(model.layer(l).weight()));
    }
    hashes.push_back(content_hash(model.head("a1").weight));

    const RunResult r = trainer.run_sequence(model, tasks);
    CHECK(r.tasks.size() == 2); // a1 is already done and skipped
    for (const TaskReport& t : r.tasks) {
        CHECK(t.trace.size() == 100);
        CHECK(t.steps == 100);
    }
    std::vector<std::uint64_t> after;
    for (std::size_t l : model.placed_layers()) {
        after.push_back(content_hash(model.layer(l).find("a1")->a));
        after.push_back(content_hash(model.layer(l).find("a1")->b));
        after.push_back(content_hash(model.layer(l).weight()));
    }
    after.push_back(content_hash(model.head("a1").weight));
    CHECK(hashes == after);

    for (std::size_t l : model.placed_layers()) {
        CHECK(model.layer(l).branches().size() == 3);
        for (const LoraBranch& b : model.layer(l).branches()) {
            CHECK(b.frozen);
        }
    }
    CHECK(model.trainable_parameter_count() == 0);
}

TEST_CASE("identical configs give identical checkpoints") {
    const auto dir = oracle::scratch_dir("trainer_determinism");
    auto run = [&](const fs::path& root) {
        RunConfig cfg;
        cfg.seed = 5;
        ContinualTrainer trainer(cfg);
        ToyModel model = ToyModel::build(cfg.model, 5);
        RunOptions options;
        options.checkpoint_root = root;
        return trainer.run_sequence(model, sequence(60), options);
    };
    const RunResult a = run(dir / "a");
    const RunResult b = run(dir / "b");
    CHECK(a.tasks.back().final_train_loss == b.tasks.back().final_train_loss);
    for (const auto& entry : fs::recursive_directory_iterator(dir / "a")) {
        if (entry.is_regular_file()) {
            const fs::path other = dir / "b" / fs::relative(entry.path(), dir / "a");
            CHECK_MESSAGE(slurp(entry.path()) == slurp(other), other.string());
        }
    }
    CHECK(fs::exists(dir / "a" / "task_3" / "manifest.json"));
    fs::remove_all(dir);
}

TEST_CASE("non-finite loss stops training with a diagnostic checkpoint") {
    const auto dir = oracle::scratch_dir("trainer_nan");
    RunConfig cfg;
    cfg.learning_rate = 1e300;
    ContinualTrainer trainer(cfg);
    ToyModel model = ToyModel::build(cfg.model, 1);
    RunOptions options;
    options.diagnostic_dir = dir / "diag";
    const std::vector<TaskSpec> tasks = {{"x", "m", "synth:1:1:2", 2, 20, 8}};
    CHECK_THROWS_AS(trainer.run_sequence(model, tasks, options), NumericError);
    CHECK(fs::exists(dir / "diag" / "manifest.json"));
    fs::remove_all(dir);
}

TEST_CASE("config validation") {
    RunConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.optimizer.weight_decay = 0.01;
    CHECK_THROWS(cfg.validate());
    cfg = RunConfig{};
    cfg.rank = 0;
    CHECK_THROWS(cfg.validate());
    cfg = RunConfig{};
    cfg.warmup_ratio = 0.9;
    CHECK_THROWS(cfg.validate());
    cfg = RunConfig{};
    cfg.learning_rate = -1.0;
    CHECK_THROWS(cfg.validate());

    std::vector<TaskSpec> dup = sequence(10);
    dup[1].task_id = "a1";
    CHECK_THROWS(validate_sequence(dup));
    std::vector<TaskSpec> classes = sequence(10);
    classes[0].class_count = 3;
    CHECK_THROWS_AS(validate_sequence(classes), ConfigError);
}

TEST_CASE("trace file") {
    const auto dir = oracle::scratch_dir("trace");
    RunConfig cfg;
    ContinualTrainer trainer(cfg);
    ToyModel model = ToyModel::build(cfg.model, 1);
    const RunResult r = trainer.run_sequence(model, sequence(10));
    write_trace_csv(r.tasks, dir / "trace.csv");
    std::ifstream in(dir / "trace.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "step,ce,cr,ortho,total,lr");
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        ++rows;
    }
    CHECK(rows == 30);
    fs::remove_all(dir);
}

} // TEST_SUITE
