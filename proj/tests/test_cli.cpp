// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <fstream>
#include <iterator>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "app.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using mslora::app::run_cli;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result cli(std::vector<std::string> args) {
    args.insert(args.begin(), "mslora");
    std::vector<const char*> argv;
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const char* small_config = R"([model]
depth = 2
width = 8

[sequence]
steps = 40
batch = 16

[task.a]
modality = m1
data = synth:5:1:2
classes = 2

[task.b]
modality = m2
data = synth:6:2:2
classes = 2

[task.c]
modality = m1
data = synth:5:3:2
classes = 2
)";

fs::path write_config(const fs::path& dir, const std::string& name, const std::string& text) {
    std::ofstream(dir / name) << text;
    return dir / name;
}

} // namespace

TEST_SUITE("cli") {

TEST_CASE("train writes the run directory and resumes as a no-op") {
    const auto dir = oracle::scratch_dir("cli_train");
    const auto cfg = write_config(dir, "small.cfg", small_config);
    const auto run = dir / "run";
    const Result r = cli({"train", cfg.string(), "--output", run.string()});
    CHECK_MESSAGE(r.code == 0, r.err);
    for (const char* f : {"config.echo", "report.json", "trace.csv", "exports/similarity.csv",
                          "checkpoints/task_1/manifest.json", "checkpoints/task_3/manifest.json"}) {
        CHECK_MESSAGE(fs::exists(run / f), f);
    }
    const auto report = nlohmann::json::parse(slurp(run / "report.json"));
    CHECK(report["tasks"].size() == 3);
    CHECK(report["stability"]["all_bitwise_equal"] == true);
    CHECK(mslora::parse_config(slurp(run / "config.echo")).output_dir == run);

    const std::string before = slurp(run / "report.json");
    const Result again = cli({"train", cfg.string(), "--output", run.string(), "--resume"});
    CHECK_MESSAGE(again.code == 0, again.err);
    CHECK(again.out.find("resuming") != std::string::npos);
    CHECK(again.out.find("task a") == std::string::npos);
    CHECK(slurp(run / "report.json") == before);
    CHECK_FALSE(fs::exists(run / "checkpoints" / "task_4"));

    // Resume after losing the last checkpoint trains only the last task.
    fs::remove_all(run / "checkpoints" / "task_3");
    const Result partial = cli({"train", cfg.string(), "--output", run.string(), "--resume"});
    CHECK(partial.code == 0);
    CHECK(partial.out.find("task c") != std::string::npos);
    CHECK(partial.out.find("task a") == std::string::npos);
    CHECK(nlohmann::json::parse(slurp(run / "report.json"))["tasks"].size() == 3);

    SUBCASE("verify on the run") {
        const Result v = cli({"verify", run.string(), "--suite", "prop1"});
        CHECK_MESSAGE(v.code == 0, v.err);
        const auto j = nlohmann::json::parse(v.out);
        CHECK(j["passed"] == true);
        CHECK(j["prop1"]["detail"].size() == 4);
        const Result s = cli({"verify", (run / "checkpoints" / "task_2").string(), "--suite", "stability"});
        CHECK(s.code == 0);
        const Result bad = cli({"verify", run.string(), "--suite", "nothing"});
        CHECK(bad.code == 1);
    }
    SUBCASE("exports") {
        const auto sim = dir / "out" / "sim.csv";
        CHECK(cli({"export", run.string(), "--what", "sim", "--out", sim.string()}).code == 0);
        CHECK(slurp(sim).rfind("task_id,a,b,c\n", 0) == 0);
        CHECK(cli({"export", run.string(), "--what", "sim", "--out", sim.string()}).code == 1);
        CHECK(cli({"export", run.string(), "--what", "delta", "--out", sim.string(), "--force"}).code == 0);
        CHECK(slurp(sim).rfind("layer,row,col,value\n", 0) == 0);
        const auto emb = dir / "out" / "emb.csv";
        CHECK(cli({"export", run.string(), "--what", "embeddings", "--out", emb.string()}).code == 0);
        CHECK(cli({"export", run.string(), "--what", "pictures", "--out", (dir / "x.csv").string()}).code == 1);
        CHECK(cli({"export", (dir / "nowhere").string(), "--what", "sim", "--out", (dir / "y.csv").string()}).code ==
              1);
    }
    fs::remove_all(dir);
}

TEST_CASE("config errors exit 1 with a line number") {
    const auto dir = oracle::scratch_dir("cli_config");
    const auto cfg = write_config(dir, "bad.cfg", "[model]\ndepth = 2\nwidht = 3\n");
    const Result r = cli({"train", cfg.string(), "--output", (dir / "run").string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("line 3") != std::string::npos);
    CHECK(cli({"train", (dir / "missing.cfg").string()}).code == 1);
    CHECK(cli({"frobnicate"}).code == 1);
    CHECK(cli({}).code == 1);
    CHECK(cli({"--help"}).code == 0);
    fs::remove_all(dir);
}

TEST_CASE("runtime errors exit 2") {
    const auto dir = oracle::scratch_dir("cli_runtime");
    const auto cfg = write_config(dir, "nan.cfg", std::string(small_config) + "[optimizer]\nlr = 1e300\n");
    const Result r = cli({"train", cfg.string(), "--output", (dir / "run").string()});
    CHECK(r.code == 2);
    CHECK(fs::exists(dir / "run" / "diagnostic" / "manifest.json"));
    fs::remove_all(dir);
}

TEST_CASE("sweep") {
    const auto dir = oracle::scratch_dir("cli_sweep");
    const auto cfg = write_config(dir, "small.cfg", small_config);
    CHECK(cli({"sweep", cfg.string(), "--axis", "rank", "--output", (dir / "s0").string()}).code == 1);
    CHECK(cli({"sweep", cfg.string(), "--axis", "rank", "--values", "", "--output", (dir / "s0").string()}).code ==
          1);
    CHECK(cli({"sweep", cfg.string(), "--axis", "rank", "--values", "two"}).code == 1);
    CHECK(cli({"sweep", cfg.string(), "--axis", "order", "--values", "a:b"}).code == 1);
    CHECK(cli({"sweep", cfg.string(), "--axis", "colour", "--values", "1"}).code == 1);

    const Result r = cli({"sweep", cfg.string(), "--axis", "rank", "--values", "1,2", "--output", (dir / "s1").string()});
    CHECK_MESSAGE(r.code == 0, r.err);
    const std::string csv = slurp(dir / "s1" / "sweep_rank.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    CHECK(csv.find("rank,1,ok") != std::string::npos);
    CHECK(csv.find("rank,2,ok") != std::string::npos);

    // rank 16 exceeds the width of 8 and is rejected before anything runs.
    CHECK(cli({"sweep", cfg.string(), "--axis", "rank", "--values", "2,16", "--output", (dir / "s2").string()}).code ==
          1);
    CHECK_FALSE(fs::exists(dir / "s2" / "sweep_rank.csv"));

    // Huge weights overflow the loss during training: that run fails, the other is still recorded.
    const Result mixed = cli({"sweep", cfg.string(), "--axis", "weights", "--values", "0.1:0.01,1e308:1e308",
                              "--output", (dir / "s2").string()});
    CHECK(mixed.code == 2);
    const std::string mixed_csv = slurp(dir / "s2" / "sweep_weights.csv");
    CHECK(mixed_csv.find("weights,0.1:0.01,ok") != std::string::npos);
    CHECK(mixed_csv.find("weights,1e308:1e308,failed") != std::string::npos);

    const Result order = cli({"sweep", cfg.string(), "--axis", "order", "--values", "a:b:c,c:b:a", "--output",
                              (dir / "s3").string(), "--parallel"});
    CHECK_MESSAGE(order.code == 0, order.err);
    CHECK(slurp(dir / "s3" / "sweep.json").find("warning") != std::string::npos);
    fs::remove_all(dir);
}

} // TEST_SUITE
