// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "mslora/autodiff.hpp"
#include "mslora/errors.hpp"
#include "mslora/rng.hpp"
#include "mslora/taskgen.hpp"
#include "oracles.hpp"

using namespace mslora;

TEST_SUITE("taskgen") {

TEST_CASE("modality transforms") {
    const SyntheticModality m1 = gen_modality("a", 16, 7);
    const SyntheticModality m2 = gen_modality("b", 16, 7);
    CHECK(m1.transform.bitwise_equal(m2.transform));
    CHECK(m1.offset.bitwise_equal(m2.offset));

    const Matrix qtq = matmul(m1.transform.transposed(), m1.transform);
    CHECK(max_abs_diff(qtq, Matrix::identity(16)) < 1e-12);

    CounterRng rng(5);
    for (int i = 0; i < 20; ++i) {
        const Matrix v = gaussian_matrix(rng, 16, 1, 1.0);
        const Matrix w = matmul(m1.transform, v);
        double nv = 0.0, nw = 0.0;
        for (std::size_t r = 0; r < 16; ++r) {
            nv += v(r, 0) * v(r, 0);
            nw += w(r, 0) * w(r, 0);
        }
        CHECK(std::abs(std::sqrt(nv) - std::sqrt(nw)) < 1e-10);
        CHECK(max_abs_diff(matmul(m1.transform.transposed(), w), v) < 1e-10);
    }
}

TEST_CASE("different seeds give different transforms") {
    double smallest = 1e9;
    for (std::uint64_t s = 0; s < 100; ++s) {
        const SyntheticModality a = gen_modality("a", 16, 2 * s + 1);
        const SyntheticModality b = gen_modality("b", 16, 2 * s + 2);
        Tape tape;
        smallest = std::min(
            smallest, mean_abs_diff(tape.constant(a.transform), tape.constant(b.transform)).scalar());
    }
    CHECK(smallest > 0.1);
}

TEST_CASE("datasets are deterministic and split 80/20") {
    const SyntheticModality m = gen_modality("a", 16, 3);
    const LabeledDataset d1 = gen_task(m, 42, 4);
    const LabeledDataset d2 = gen_task(m, 42, 4);
    CHECK(d1.features.bitwise_equal(d2.features));
    CHECK(d1.labels == d2.labels);
    CHECK(d1.train == d2.train);
    CHECK(d1.size() == 800);
    CHECK(d1.train.size() == 640);
    CHECK(d1.test.size() == 160);
    std::set<std::size_t> all(d1.train.begin(), d1.train.end());
    all.insert(d1.test.begin(), d1.test.end());
    CHECK(all.size() == 800);

    const LabeledDataset other = gen_task(m, 43, 4);
    CHECK_FALSE(other.features.bitwise_equal(d1.features));
}

TEST_CASE("default tasks are linearly separable") {
    const SyntheticModality m = gen_modality("a", 16, 11);
    for (std::uint64_t t : {1u, 2u, 3u}) {
        const LabeledDataset d = gen_task(m, t, 4);
        CHECK(oracle::logistic_regression_accuracy(d) >= 0.99);
    }
    const LabeledDataset two = gen_task(m, 9, 2);
    CHECK(oracle::logistic_regression_accuracy(two) >= 0.99);
}

TEST_CASE("tasks of one modality share the base frame") {
    const SyntheticModality m = gen_modality("a", 8, 5);
    const LabeledDataset d = gen_task(m, 1, 3);
    Matrix centered = d.features;
    for (std::size_t r = 0; r < centered.rows(); ++r) {
        for (std::size_t c = 0; c < centered.cols(); ++c) {
            centered(r, c) -= m.offset(r, 0);
        }
    }
    const Matrix base = matmul(m.transform.transposed(), centered);
    CHECK(max_abs_diff(matmul(m.transform, base), centered) < 1e-10);
}

TEST_CASE("center placement gives up") {
    const SyntheticModality m = gen_modality("a", 2, 5);
    TaskGenOptions options;
    options.n_per_class = 2;
    CHECK_THROWS_AS(gen_task(m, 1, 40, options), Error);
}

TEST_CASE("dataset references and CSV") {
    CHECK(is_synth_ref("synth:1:2:3"));
    CHECK_FALSE(is_synth_ref("data/x.csv"));
    const SynthRef ref = parse_synth_ref("synth:101:7:4");
    CHECK(ref.modality_seed == 101);
    CHECK(ref.task_seed == 7);
    CHECK(ref.class_count == 4);
    CHECK_THROWS(parse_synth_ref("synth:1:2"));
    CHECK_THROWS(parse_synth_ref("synth:a:2:3"));

    const LabeledDataset d = resolve_dataset("synth:101:7:3", 16, 0);
    CHECK(d.class_count == 3);

    const auto dir = oracle::scratch_dir("csv");
    write_dataset_csv(d, dir / "d.csv");
    const LabeledDataset back = read_dataset_csv(dir / "d.csv", 3);
    CHECK(back.features.bitwise_equal(d.features));
    CHECK(back.labels == d.labels);
    CHECK(back.class_count == 3);
    const LabeledDataset again = read_dataset_csv(dir / "d.csv", 3);
    CHECK(again.train == back.train);
    CHECK_THROWS(read_dataset_csv(dir / "missing.csv", 0));
    CHECK_THROWS_AS(resolve_dataset((dir / "d.csv").string(), 8, 0), ShapeError);
    std::filesystem::remove_all(dir);
}

} // TEST_SUITE
