// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "mslora/optimizer.hpp"
#include "mslora/rng.hpp"

using namespace mslora;

TEST_SUITE("optimizer") {

TEST_CASE("warmup length") {
    CHECK(warmup_steps(100, 0.03) == 3);
    CHECK(warmup_steps(300, 0.03) == 9);
    CHECK(warmup_steps(10, 0.03) == 1);
    CHECK(warmup_steps(100, 0.0) == 0);
}

TEST_CASE("learning rate schedule") {
    const double lr = 2e-4;
    CHECK(lr_at(0, 100, lr, 0.03) == doctest::Approx(lr / 3.0).epsilon(1e-15));
    CHECK(lr_at(2, 100, lr, 0.03) == lr);
    CHECK(lr_at(3, 100, lr, 0.03) == lr);
    const double expected = lr * 0.5 * (1.0 + std::cos(48.0 * std::numbers::pi / 97.0));
    CHECK(lr_at(51, 100, lr, 0.03) == doctest::Approx(expected).epsilon(1e-15));
    CHECK(lr_at(51, 100, lr, 0.03) / lr == doctest::Approx(0.508097).epsilon(1e-6));
    CHECK(lr_at(99, 100, lr, 0.03) < 1e-3 * lr);
    CHECK_THROWS(lr_at(100, 100, lr, 0.03));
    for (std::size_t s = 4; s < 100; ++s) {
        CHECK(lr_at(s, 100, lr, 0.03) <= lr_at(s - 1, 100, lr, 0.03));
    }
}

TEST_CASE("single step") {
    Matrix p(1, 1, 0.0);
    Matrix g(1, 1, 1.0);
    AdamW opt;
    const std::vector<ParamSlot> slots = {{"p", &p, &g}};
    opt.step(slots, 0.1);
    CHECK(p(0, 0) == doctest::Approx(-0.1).epsilon(1e-6));
    CHECK(opt.step_count() == 1);
}

TEST_CASE("zero gradient leaves parameters unchanged") {
    CounterRng rng(1);
    Matrix p = gaussian_matrix(rng, 3, 3, 1.0);
    const Matrix before = p;
    Matrix g(3, 3);
    AdamW opt;
    const std::vector<ParamSlot> slots = {{"p", &p, &g}};
    for (int i = 0; i < 5; ++i) {
        opt.step(slots, 0.1);
    }
    CHECK(p.bitwise_equal(before));
}

TEST_CASE("zero weight decay matches the plain update") {
    CounterRng rng(2);
    Matrix p1 = gaussian_matrix(rng, 2, 4, 1.0);
    Matrix p2 = p1;
    const Matrix g = gaussian_matrix(rng, 2, 4, 1.0);
    AdamW plain;
    AdamWParams zero;
    zero.weight_decay = 0.0;
    AdamW decayed(zero);
    for (int i = 0; i < 10; ++i) {
        plain.step(std::vector<ParamSlot>{{"p", &p1, &g}}, 0.01);
        decayed.step(std::vector<ParamSlot>{{"p", &p2, &g}}, 0.01);
    }
    CHECK(p1.bitwise_equal(p2));
}

TEST_CASE("state round-trips through restore") {
    CounterRng rng(3);
    Matrix p1 = gaussian_matrix(rng, 2, 2, 1.0);
    Matrix p2 = p1;
    const Matrix g = gaussian_matrix(rng, 2, 2, 1.0);
    AdamW a;
    a.step(std::vector<ParamSlot>{{"p", &p1, &g}}, 0.01);
    p2 = p1;
    AdamW b;
    b.restore(a.state(), a.step_count());
    a.step(std::vector<ParamSlot>{{"p", &p1, &g}}, 0.01);
    b.step(std::vector<ParamSlot>{{"p", &p2, &g}}, 0.01);
    CHECK(p1.bitwise_equal(p2));
}

} // TEST_SUITE
