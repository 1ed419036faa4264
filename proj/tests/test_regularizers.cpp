// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mslora/errors.hpp"
#include "mslora/regularizers.hpp"
#include "mslora/rng.hpp"
#include "oracles.hpp"

using namespace mslora;

namespace {

LoraBranch make_branch(Matrix a, Matrix b, bool frozen, std::string id = "t", std::string modality = "m") {
    LoraBranch br;
    br.rank = a.cols();
    br.a = std::move(a);
    br.b = std::move(b);
    br.frozen = frozen;
    br.task_id = std::move(id);
    br.modality_id = std::move(modality);
    return br;
}

double sim_value(const LoraBranch& p, const LoraBranch& q, bool normalize = true) {
    Tape tape;
    ParamBinder binder(tape);
    return branch_similarity(binder, p, q, normalize).scalar();
}

Matrix orthonormal_columns(std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (std::size_t c = 0; c < cols; ++c) {
        m(c, c) = 1.0;
    }
    return m;
}

/// Model with tasks p0 (m0), p1 (m1) frozen and current task c (m0).
ToyModel three_task_model(std::size_t depth, std::uint64_t seed) {
    ModelShape shape;
    shape.depth = depth;
    shape.width = 4;
    ToyModel model = ToyModel::build(shape, seed);
    const char* ids[] = {"p0", "p1", "c"};
    const char* mods[] = {"m0", "m1", "m0"};
    CounterRng rng(seed + 100);
    for (int i = 0; i < 3; ++i) {
        TaskHead info;
        info.task_id = ids[i];
        info.modality_id = mods[i];
        info.class_count = 2;
        model.begin_task(info, 2, 1.0, seed + i);
        for (std::size_t l : model.placed_layers()) {
            LoraBranch* b = model.layer(l).find(ids[i]);
            b->a = gaussian_matrix(rng, 4, 2, 0.5);
            b->b = gaussian_matrix(rng, 2, 4, 0.5);
        }
        if (i < 2) {
            model.freeze_task(ids[i]);
        }
    }
    return model;
}

} // namespace

TEST_SUITE("regularizers") {

TEST_CASE("branch similarity") {
    CounterRng rng(1);
    const Matrix a = gaussian_matrix(rng, 4, 2, 1.0);
    const Matrix b = gaussian_matrix(rng, 2, 3, 1.0);
    const LoraBranch p = make_branch(a, b, false);
    const LoraBranch q = make_branch(a, b + Matrix(2, 3, 1.0), true);
    CHECK(sim_value(p, p) == 1.0);
    CHECK(branch_distance(p, q) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(sim_value(p, q) == doctest::Approx(0.606530659712633).epsilon(1e-14));
    CHECK(sim_value(p, q) == sim_value(q, p));
    // Unnormalized: the raw Manhattan distance is the number of B entries.
    CHECK(sim_value(p, q, false) == doctest::Approx(std::exp(-6.0)).epsilon(1e-14));
    CHECK(branch_distance(p, q, false) == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("converge and diverge losses") {
    CounterRng rng(2);
    const Matrix a = gaussian_matrix(rng, 3, 2, 1.0);
    const Matrix b = gaussian_matrix(rng, 2, 3, 1.0);
    const LoraBranch cur = make_branch(a, b, false);
    const LoraBranch same = make_branch(a, b, true);
    const LoraBranch half = make_branch(a, b + Matrix(2, 3, 1.0), true);

    Tape tape;
    ParamBinder binder(tape);
    const std::vector<const LoraBranch*> none;
    const std::vector<const LoraBranch*> identical = {&same};
    const std::vector<const LoraBranch*> at_half = {&half};
    const std::vector<const LoraBranch*> both = {&same, &half};
    CHECK(converge_loss(binder, cur, none).scalar() == 0.0);
    CHECK(converge_loss(binder, cur, identical).scalar() == 0.0);
    CHECK(converge_loss(binder, cur, at_half).scalar() == doctest::Approx(0.393469340287367).epsilon(1e-14));
    CHECK(diverge_loss(binder, cur, none).scalar() == 0.0);
    CHECK(diverge_loss(binder, cur, identical).scalar() == 1.0);
    const double d = diverge_loss(binder, cur, both).scalar();
    CHECK(d > 0.0);
    CHECK(d <= 2.0);
}

TEST_CASE("contrastive loss over a model") {
    const ToyModel model = three_task_model(2, 5);
    const ModalityPartition part = ModalityPartition::from_model(model, "c");
    CHECK(part.same_modality == std::vector<std::string>{"p0"});
    CHECK(part.different_modality == std::vector<std::string>{"p1"});

    // Per-layer oracle: 1 - sim(p0, c) + sim(p1, c) at each placed layer.
    double per_layer_sum = 0.0;
    for (std::size_t l : model.placed_layers()) {
        const BranchStack& s = model.layer(l);
        per_layer_sum += 1.0 - std::exp(-branch_distance(*s.find("p0"), *s.find("c"))) +
                         std::exp(-branch_distance(*s.find("p1"), *s.find("c")));
    }
    Tape tape;
    ParamBinder binder(tape);
    CHECK(cr_loss(binder, model, part).scalar() == doctest::Approx(per_layer_sum).epsilon(1e-14));
    RegularizerOptions mean;
    mean.reduce = CrReduce::mean;
    CHECK(cr_loss(binder, model, part, mean).scalar() == doctest::Approx(per_layer_sum / 2.0).epsilon(1e-14));
}

TEST_CASE("contrastive loss is zero for the first task and for identical same-modality branches") {
    ModelShape shape;
    shape.depth = 2;
    shape.width = 4;
    ToyModel model = ToyModel::build(shape, 1);
    TaskHead info;
    info.task_id = "first";
    info.modality_id = "m";
    info.class_count = 2;
    model.begin_task(info, 2, 1.0, 1);
    CounterRng rng(9);
    for (std::size_t l : model.placed_layers()) {
        model.layer(l).find("first")->a = gaussian_matrix(rng, 4, 2, 1.0);
    }
    {
        Tape tape;
        ParamBinder binder(tape);
        CHECK(cr_loss(binder, model, ModalityPartition::from_model(model, "first")).scalar() == 0.0);
    }
    model.freeze_task("first");
    info.task_id = "second";
    model.begin_task(info, 2, 1.0, 2);
    for (std::size_t l : model.placed_layers()) {
        LoraBranch* cur = model.layer(l).find("second");
        const LoraBranch* prev = model.layer(l).find("first");
        cur->a = prev->a;
        cur->b = prev->b;
    }
    Tape tape;
    ParamBinder binder(tape);
    CHECK(cr_loss(binder, model, ModalityPartition::from_model(model, "second")).scalar() == 0.0);
}

TEST_CASE("partition validation") {
    const ToyModel model = three_task_model(1, 3);
    ModalityPartition part = ModalityPartition::from_model(model, "c");
    CHECK_NOTHROW(part.validate(model));
    part.same_modality.push_back("ghost");
    CHECK_THROWS(part.validate(model));
}

TEST_CASE("orthogonality loss") {
    Tape tape;
    ParamBinder binder(tape);
    const LoraBranch ortho = make_branch(orthonormal_columns(6, 3), orthonormal_columns(5, 3).transposed(), false);
    CHECK(ortho_loss(binder, ortho).scalar() < 1e-12);

    const LoraBranch zero = make_branch(Matrix(6, 4), Matrix(4, 5), false);
    CHECK(ortho_loss(binder, zero).scalar() == 8.0);

    const LoraBranch doubled = make_branch(2.0 * orthonormal_columns(6, 2), Matrix(2, 5), false);
    CHECK(ortho_loss(binder, doubled).scalar() == 18.0 + 2.0);

    CounterRng rng(6);
    const LoraBranch random = make_branch(gaussian_matrix(rng, 6, 3, 1.0), gaussian_matrix(rng, 3, 5, 1.0), false);
    const double expected = oracle::gram_defect(random.a, false) + oracle::gram_defect(random.b, true);
    CHECK(ortho_loss(binder, random).scalar() == doctest::Approx(expected).epsilon(1e-13));
}

TEST_CASE("total loss") {
    Tape tape;
    Var ce = tape.constant(Matrix(1, 1, 1.0));
    Var cr = tape.constant(Matrix(1, 1, 2.0));
    Var ortho = tape.constant(Matrix(1, 1, 3.0));
    CHECK(total_loss(ce, cr, ortho, {0.1, 0.01}).scalar() == doctest::Approx(1.23).epsilon(1e-15));
    const double odd = 0.8414709848078965;
    Var ce2 = tape.constant(Matrix(1, 1, odd));
    CHECK(total_loss(ce2, cr, ortho, {0.0, 0.0}).scalar() == odd);
    CHECK(LossWeights{}.alpha == 0.1);
    CHECK(LossWeights{}.beta == 0.01);
    CHECK_THROWS(LossWeights{-0.1, 0.0}.validate());
    CHECK_THROWS(LossWeights{0.0, std::nan("")}.validate());
}

TEST_CASE("reduce parsing") {
    CHECK(parse_cr_reduce("mean") == CrReduce::mean);
    CHECK(to_string(CrReduce::sum) == "sum");
    CHECK_THROWS(parse_cr_reduce("max"));
}

} // TEST_SUITE
