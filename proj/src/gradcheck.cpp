// SPDX-License-Identifier: Apache-2.0
#include "mslora/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mslora/errors.hpp"
#include "mslora/regularizers.hpp"
#include "mslora/rng.hpp"

namespace mslora {

GradientCheck check_gradient(const ScalarFn& fn, const std::vector<Matrix*>& params, double step) {
    std::vector<Matrix> analytic;
    {
        Tape tape;
        ParamBinder binder(tape);
        for (Matrix* p : params) {
            binder.bind(*p, true);
        }
        Var root = fn(binder);
        tape.backward(root);
        for (Matrix* p : params) {
            analytic.push_back(*binder.grad(*p));
        }
    }
    auto evaluate = [&] {
        Tape tape;
        ParamBinder binder(tape);
        for (Matrix* p : params) {
            binder.bind(*p, true);
        }
        return fn(binder).scalar();
    };
    GradientCheck result;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Matrix& p = *params[k];
        Matrix numeric(p.rows(), p.cols());
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double saved = p.data()[i];
            p.data()[i] = saved + step;
            const double plus = evaluate();
            p.data()[i] = saved - step;
            const double minus = evaluate();
            p.data()[i] = saved;
            numeric.data()[i] = (plus - minus) / (2.0 * step);
        }
        const double abs_err = max_abs_diff(analytic[k], numeric);
        const double denom = std::max({max_abs(analytic[k]), max_abs(numeric), 1e-12});
        result.max_abs_error = std::max(result.max_abs_error, abs_err);
        result.max_rel_error = std::max(result.max_rel_error, abs_err / denom);
    }
    return result;
}

namespace {

constexpr double kink_margin = 0.05;

struct Sampler {
    CounterRng rng;

    std::size_t dim(std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }
    double unit() { return 2.0 * rng.uniform() - 1.0; }

    Matrix uniform(std::size_t r, std::size_t c) {
        Matrix m(r, c);
        for (double& v : m.data()) {
            v = unit();
        }
        return m;
    }
    Matrix away_from_zero(std::size_t r, std::size_t c) {
        Matrix m(r, c);
        for (double& v : m.data()) {
            do {
                v = unit();
            } while (std::abs(v) < kink_margin);
        }
        return m;
    }
    /// Random matrix whose entries differ from `ref` by at least the kink margin.
    Matrix apart_from(const Matrix& ref) {
        Matrix m(ref.rows(), ref.cols());
        for (std::size_t i = 0; i < m.size(); ++i) {
            do {
                m.data()[i] = unit();
            } while (std::abs(m.data()[i] - ref.data()[i]) < kink_margin);
        }
        return m;
    }
    LoraBranch branch(std::size_t out, std::size_t in, std::size_t rank, std::string id, std::string modality,
                      bool frozen) {
        LoraBranch b;
        b.a = uniform(out, rank);
        b.b = uniform(rank, in);
        b.rank = rank;
        b.task_id = std::move(id);
        b.modality_id = std::move(modality);
        b.frozen = frozen;
        return b;
    }
    /// Branch whose entries all sit at least the kink margin away from every reference branch.
    LoraBranch branch_apart(const std::vector<const LoraBranch*>& refs, std::size_t out, std::size_t in,
                            std::size_t rank, std::string id, std::string modality) {
        LoraBranch b = branch(out, in, rank, std::move(id), std::move(modality), false);
        auto fix = [&](Matrix& m, auto member) {
            for (std::size_t i = 0; i < m.size(); ++i) {
                auto too_close = [&] {
                    return std::any_of(refs.begin(), refs.end(), [&](const LoraBranch* r) {
                        return std::abs((r->*member).data()[i] - m.data()[i]) < kink_margin;
                    });
                };
                while (too_close()) {
                    m.data()[i] = unit();
                }
            }
        };
        fix(b.a, &LoraBranch::a);
        fix(b.b, &LoraBranch::b);
        return b;
    }
};

/// Folds a matrix-valued node into a scalar with a random offset so every output
/// entry gets a distinct weight in the gradient.
Var fold(Var out, const Matrix& offset) {
    return frobenius_sq(add(out, out.tape->constant(offset)));
}

using Case = std::function<GradientCheck(Sampler&, double step)>;

std::vector<std::pair<std::string, Case>> battery_cases() {
    std::vector<std::pair<std::string, Case>> cases;

    cases.emplace_back("matmul", [](Sampler& s, double h) {
        const auto r = s.dim(1, 5), k = s.dim(1, 5), c = s.dim(1, 5);
        Matrix a = s.uniform(r, k), b = s.uniform(k, c), off = s.uniform(r, c);
        return check_gradient([&](ParamBinder& pb) { return fold(matmul(pb.bind(a, true), pb.bind(b, true)), off); },
                              {&a, &b}, h);
    });
    cases.emplace_back("add", [](Sampler& s, double h) {
        const auto r = s.dim(1, 5), c = s.dim(1, 5);
        Matrix a = s.uniform(r, c), b = s.uniform(r, c), off = s.uniform(r, c);
        return check_gradient([&](ParamBinder& pb) { return fold(add(pb.bind(a, true), pb.bind(b, true)), off); },
                              {&a, &b}, h);
    });
    cases.emplace_back("sub", [](Sampler& s, double h) {
        const auto r = s.dim(1, 5), c = s.dim(1, 5);
        Matrix a = s.uniform(r, c), b = s.uniform(r, c), off = s.uniform(r, c);
        return check_gradient([&](ParamBinder& pb) { return fold(sub(pb.bind(a, true), pb.bind(b, true)), off); },
                              {&a, &b}, h);
    });
    cases.emplace_back("scale", [](Sampler& s, double h) {
        const auto r = s.dim(1, 5), c = s.dim(1, 5);
        const double k = 3.0 * s.unit();
        Matrix a = s.uniform(r, c), off = s.uniform(r, c);
        return check_gradient([&](ParamBinder& pb) { return fold(scale(pb.bind(a, true), k), off); }, {&a}, h);
    });
    cases.emplace_back("transpose", [](Sampler& s, double h) {
        const auto r = s.dim(1, 5), c = s.dim(1, 5);
        Matrix a = s.uniform(r, c), off = s.uniform(c, r);
        return check_gradient([&](ParamBinder& pb) { return fold(transpose(pb.bind(a, true)), off); }, {&a}, h);
    });
    cases.emplace_back("relu", [](Sampler& s, double h) {
        const auto r = s.dim(1, 5), c = s.dim(1, 5);
        Matrix a = s.away_from_zero(r, c), off = s.uniform(r, c);
        return check_gradient([&](ParamBinder& pb) { return fold(relu(pb.bind(a, true)), off); }, {&a}, h);
    });
    cases.emplace_back("add_col_bias", [](Sampler& s, double h) {
        const auto r = s.dim(1, 5), c = s.dim(1, 5);
        Matrix x = s.uniform(r, c), b = s.uniform(r, 1), off = s.uniform(r, c);
        return check_gradient(
            [&](ParamBinder& pb) { return fold(add_col_bias(pb.bind(x, true), pb.bind(b, true)), off); }, {&x, &b}, h);
    });
    cases.emplace_back("add_row_bias", [](Sampler& s, double h) {
        const auto r = s.dim(1, 5), c = s.dim(1, 5);
        Matrix x = s.uniform(r, c), b = s.uniform(1, c), off = s.uniform(r, c);
        return check_gradient(
            [&](ParamBinder& pb) { return fold(add_row_bias(pb.bind(x, true), pb.bind(b, true)), off); }, {&x, &b}, h);
    });
    cases.emplace_back("sum", [](Sampler& s, double h) {
        const auto r = s.dim(1, 5), c = s.dim(1, 5);
        Matrix a = s.uniform(r, c), off = s.uniform(1, 1);
        return check_gradient([&](ParamBinder& pb) { return fold(sum(pb.bind(a, true)), off); }, {&a}, h);
    });
    cases.emplace_back("softmax_cross_entropy", [](Sampler& s, double h) {
        const auto r = s.dim(1, 6), c = s.dim(2, 5);
        Matrix z = 3.0 * s.uniform(r, c);
        std::vector<std::size_t> labels(r);
        for (auto& l : labels) {
            l = s.rng.below(c);
        }
        return check_gradient([&](ParamBinder& pb) { return softmax_cross_entropy(pb.bind(z, true), labels); }, {&z},
                              h);
    });
    cases.emplace_back("frobenius_sq", [](Sampler& s, double h) {
        const auto r = s.dim(1, 5), c = s.dim(1, 5);
        Matrix a = s.uniform(r, c);
        return check_gradient([&](ParamBinder& pb) { return frobenius_sq(pb.bind(a, true)); }, {&a}, h);
    });
    cases.emplace_back("mean_abs_diff", [](Sampler& s, double h) {
        const auto r = s.dim(1, 5), c = s.dim(1, 5);
        Matrix a = s.uniform(r, c);
        Matrix b = s.apart_from(a);
        return check_gradient([&](ParamBinder& pb) { return mean_abs_diff(pb.bind(a, true), pb.bind(b, true)); },
                              {&a, &b}, h);
    });
    cases.emplace_back("exp_neg", [](Sampler& s, double h) {
        const auto r = s.dim(1, 3), c = s.dim(1, 3);
        Matrix x = s.uniform(r, c), off = s.uniform(r, c);
        return check_gradient([&](ParamBinder& pb) { return fold(exp_neg(pb.bind(x, true)), off); }, {&x}, h);
    });

    cases.emplace_back("branch_similarity", [](Sampler& s, double h) {
        const auto out = s.dim(2, 6), in = s.dim(2, 6), rank = s.dim(1, 2);
        LoraBranch p = s.branch(out, in, rank, "p", "m0", false);
        LoraBranch q = s.branch_apart({&p}, out, in, rank, "q", "m0");
        return check_gradient([&](ParamBinder& pb) { return branch_similarity(pb, p, q); }, {&p.a, &p.b, &q.a, &q.b},
                              h);
    });
    cases.emplace_back("branch_similarity(raw)", [](Sampler& s, double h) {
        const auto out = s.dim(2, 3), in = s.dim(2, 3);
        LoraBranch p = s.branch(out, in, 1, "p", "m0", false);
        LoraBranch q = s.branch_apart({&p}, out, in, 1, "q", "m0");
        return check_gradient([&](ParamBinder& pb) { return branch_similarity(pb, p, q, false); },
                              {&p.a, &p.b, &q.a, &q.b}, h);
    });
    cases.emplace_back("converge_loss", [](Sampler& s, double h) {
        const auto out = s.dim(2, 6), in = s.dim(2, 6), rank = s.dim(1, 2);
        LoraBranch p1 = s.branch(out, in, rank, "p1", "m0", true);
        LoraBranch p2 = s.branch(out, in, rank, "p2", "m0", true);
        LoraBranch cur = s.branch_apart({&p1, &p2}, out, in, rank, "cur", "m0");
        const std::vector<const LoraBranch*> same{&p1, &p2};
        return check_gradient([&](ParamBinder& pb) { return converge_loss(pb, cur, same); }, {&cur.a, &cur.b}, h);
    });
    cases.emplace_back("diverge_loss", [](Sampler& s, double h) {
        const auto out = s.dim(2, 6), in = s.dim(2, 6), rank = s.dim(1, 2);
        LoraBranch p1 = s.branch(out, in, rank, "p1", "m1", true);
        LoraBranch p2 = s.branch(out, in, rank, "p2", "m1", true);
        LoraBranch cur = s.branch_apart({&p1, &p2}, out, in, rank, "cur", "m0");
        const std::vector<const LoraBranch*> diff{&p1, &p2};
        return check_gradient([&](ParamBinder& pb) { return diverge_loss(pb, cur, diff); }, {&cur.a, &cur.b}, h);
    });
    auto model_case = [](Sampler& s, bool full_loss, double h) {
        // depth 2, width 4, rank 2; tasks t0 (m0), t1 (m1) frozen, t2 (m0) current.
        ModelShape shape{2, 4, Placement{}};
        ToyModel model = ToyModel::build(shape, s.rng.next_u64());
        const char* modalities[] = {"m0", "m1", "m0"};
        for (int t = 0; t < 3; ++t) {
            TaskHead info;
            info.task_id = "t" + std::to_string(t);
            info.modality_id = modalities[t];
            info.class_count = 3;
            model.begin_task(info, 2, 1.0, s.rng.next_u64());
            for (std::size_t layer : model.placed_layers()) {
                LoraBranch* b = model.layer(layer).find(info.task_id);
                std::vector<const LoraBranch*> others;
                for (const LoraBranch& o : model.layer(layer).branches()) {
                    if (o.task_id != info.task_id) {
                        others.push_back(&o);
                    }
                }
                *b = s.branch_apart(others, 4, 4, 2, info.task_id, info.modality_id);
            }
            if (t < 2) {
                model.freeze_task(info.task_id);
            }
        }
        model.apply_mask(MaskPolicy::prefix, "t2");
        const ModalityPartition part = ModalityPartition::from_model(model, "t2");
        std::vector<Matrix*> params;
        for (std::size_t layer : model.placed_layers()) {
            LoraBranch* b = model.layer(layer).find("t2");
            params.push_back(&b->a);
            params.push_back(&b->b);
        }
        if (!full_loss) {
            return check_gradient([&](ParamBinder& pb) { return cr_loss(pb, model, part); }, params, h);
        }
        TaskHead& head = model.head("t2");
        params.push_back(&head.weight);
        params.push_back(&head.bias);
        const Matrix x = s.uniform(4, 5);
        std::vector<std::size_t> labels(5);
        for (auto& l : labels) {
            l = s.rng.below(3);
        }
        const LossWeights weights{0.1 + s.rng.uniform(), 0.01 + s.rng.uniform()};
        return check_gradient(
            [&](ParamBinder& pb) {
                Var logits = model_forward(model, pb, pb.tape().constant(x), "t2");
                return total_loss(softmax_cross_entropy(logits, labels), cr_loss(pb, model, part),
                                  ortho_loss(pb, model, "t2"), weights);
            },
            params, h);
    };
    cases.emplace_back("cr_loss", [model_case](Sampler& s, double h) { return model_case(s, false, h); });
    cases.emplace_back("ortho_loss", [](Sampler& s, double h) {
        const auto out = s.dim(2, 6), in = s.dim(2, 6), rank = s.dim(1, 2);
        LoraBranch b = s.branch(out, in, rank, "b", "m0", false);
        return check_gradient([&](ParamBinder& pb) { return ortho_loss(pb, b); }, {&b.a, &b.b}, h);
    });
    cases.emplace_back("total_loss", [model_case](Sampler& s, double h) { return model_case(s, true, h); });
    return cases;
}

} // namespace

std::vector<BatteryEntry> run_gradient_battery(const BatteryOptions& options) {
    std::vector<BatteryEntry> out;
    std::uint64_t tag = 0;
    for (const auto& [name, fn] : battery_cases()) {
        Sampler sampler{CounterRng(derive_seed(options.seed, ++tag))};
        BatteryEntry entry;
        entry.name = name;
        for (std::size_t i = 0; i < options.instances; ++i) {
            const GradientCheck check = fn(sampler, options.step);
            entry.max_rel_error = std::max(entry.max_rel_error, check.max_rel_error);
            ++entry.instances;
        }
        entry.passed = entry.max_rel_error < options.tolerance;
        out.push_back(std::move(entry));
    }
    return out;
}

nlohmann::json to_json(const BatteryEntry& e) {
    return {{"name", e.name}, {"instances", e.instances}, {"max_rel_error", e.max_rel_error}, {"passed", e.passed}};
}

} // namespace mslora
