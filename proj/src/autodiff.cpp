// SPDX-License-Identifier: Apache-2.0
#include "mslora/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "mslora/errors.hpp"

namespace mslora {

std::string_view op_name(OpKind kind) {
    switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::scale: return "scale";
    case OpKind::transpose: return "transpose";
    case OpKind::relu: return "relu";
    case OpKind::add_col_bias: return "add_col_bias";
    case OpKind::add_row_bias: return "add_row_bias";
    case OpKind::sum: return "sum";
    case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
    case OpKind::frobenius_sq: return "frobenius_sq";
    case OpKind::mean_abs_diff: return "mean_abs_diff";
    case OpKind::exp_neg: return "exp_neg";
    }
    return "?";
}

const Matrix& Var::value() const { return tape->value(*this); }
const Matrix& Var::grad() const { return tape->grad(*this); }

double Var::scalar() const {
    const Matrix& v = value();
    if (v.rows() != 1 || v.cols() != 1) {
        throw ShapeError(fmt::format("expected scalar node, got {}", shape_str(v)));
    }
    return v(0, 0);
}

Var Tape::leaf(Matrix value, bool requires_grad) {
    Node n;
    n.kind = OpKind::leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
}

Var Tape::push(Node node) {
    nodes_.push_back(std::move(node));
    has_grads_ = false;
    return Var{this, nodes_.size() - 1};
}

const Matrix& Tape::grad(Var v) const {
    const Node& n = nodes_.at(v.index);
    if (!has_grads_) {
        throw Error("gradients requested before backward()");
    }
    return n.grad;
}

namespace {

Tape& same_tape(Var a, Var b) {
    if (a.tape == nullptr || a.tape != b.tape) {
        throw Error("operands live on different tapes");
    }
    return *a.tape;
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(fmt::format("{} shape mismatch: {} vs {}", op, shape_str(a), shape_str(b)));
    }
}

double sign(double x) {
    return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
}

} // namespace

Var matmul(Var a, Var b) {
    Tape& t = same_tape(a, b);
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    if (av.cols() != bv.rows()) {
        throw ShapeError(fmt::format("matmul shape mismatch: {} * {}", shape_str(av), shape_str(bv)));
    }
    Tape::Node n;
    n.kind = OpKind::matmul;
    n.lhs = a.index;
    n.rhs = b.index;
    n.value = mslora::matmul(av, bv);
    n.requires_grad = t.requires_grad(a) || t.requires_grad(b);
    return t.push(std::move(n));
}

Var add(Var a, Var b) {
    Tape& t = same_tape(a, b);
    require_same_shape(t.value(a), t.value(b), "add");
    Tape::Node n;
    n.kind = OpKind::add;
    n.lhs = a.index;
    n.rhs = b.index;
    n.value = t.value(a) + t.value(b);
    n.requires_grad = t.requires_grad(a) || t.requires_grad(b);
    return t.push(std::move(n));
}

Var sub(Var a, Var b) {
    Tape& t = same_tape(a, b);
    require_same_shape(t.value(a), t.value(b), "sub");
    Tape::Node n;
    n.kind = OpKind::sub;
    n.lhs = a.index;
    n.rhs = b.index;
    n.value = t.value(a) - t.value(b);
    n.requires_grad = t.requires_grad(a) || t.requires_grad(b);
    return t.push(std::move(n));
}

Var scale(Var a, double s) {
    Tape& t = *a.tape;
    Tape::Node n;
    n.kind = OpKind::scale;
    n.lhs = a.index;
    n.scalar = s;
    n.value = s * t.value(a);
    n.requires_grad = t.requires_grad(a);
    return t.push(std::move(n));
}

Var transpose(Var a) {
    Tape& t = *a.tape;
    Tape::Node n;
    n.kind = OpKind::transpose;
    n.lhs = a.index;
    n.value = t.value(a).transposed();
    n.requires_grad = t.requires_grad(a);
    return t.push(std::move(n));
}

Var relu(Var a) {
    Tape& t = *a.tape;
    Tape::Node n;
    n.kind = OpKind::relu;
    n.lhs = a.index;
    n.value = t.value(a);
    for (double& v : n.value.data()) {
        v = v > 0.0 ? v : 0.0;
    }
    n.requires_grad = t.requires_grad(a);
    return t.push(std::move(n));
}

Var add_col_bias(Var x, Var bias) {
    Tape& t = same_tape(x, bias);
    const Matrix& xv = t.value(x);
    const Matrix& bv = t.value(bias);
    if (bv.rows() != xv.rows() || bv.cols() != 1) {
        throw ShapeError(fmt::format("add_col_bias shape mismatch: {} + {}", shape_str(xv), shape_str(bv)));
    }
    Tape::Node n;
    n.kind = OpKind::add_col_bias;
    n.lhs = x.index;
    n.rhs = bias.index;
    n.value = xv;
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        for (std::size_t c = 0; c < xv.cols(); ++c) {
            n.value(r, c) += bv(r, 0);
        }
    }
    n.requires_grad = t.requires_grad(x) || t.requires_grad(bias);
    return t.push(std::move(n));
}

Var add_row_bias(Var x, Var bias) {
    Tape& t = same_tape(x, bias);
    const Matrix& xv = t.value(x);
    const Matrix& bv = t.value(bias);
    if (bv.rows() != 1 || bv.cols() != xv.cols()) {
        throw ShapeError(fmt::format("add_row_bias shape mismatch: {} + {}", shape_str(xv), shape_str(bv)));
    }
    Tape::Node n;
    n.kind = OpKind::add_row_bias;
    n.lhs = x.index;
    n.rhs = bias.index;
    n.value = xv;
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        for (std::size_t c = 0; c < xv.cols(); ++c) {
            n.value(r, c) += bv(0, c);
        }
    }
    n.requires_grad = t.requires_grad(x) || t.requires_grad(bias);
    return t.push(std::move(n));
}

Var sum(Var a) {
    Tape& t = *a.tape;
    double total = 0.0;
    for (double v : t.value(a).data()) {
        total += v;
    }
    Tape::Node n;
    n.kind = OpKind::sum;
    n.lhs = a.index;
    n.value = Matrix(1, 1, total);
    n.requires_grad = t.requires_grad(a);
    return t.push(std::move(n));
}

Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
    Tape& t = *logits.tape;
    const Matrix& z = t.value(logits);
    if (labels.size() != z.rows()) {
        throw ShapeError(fmt::format("softmax_cross_entropy: {} labels for {} rows", labels.size(), z.rows()));
    }
    Matrix probs(z.rows(), z.cols());
    double loss = 0.0;
    for (std::size_t r = 0; r < z.rows(); ++r) {
        if (labels[r] >= z.cols()) {
            throw Error(fmt::format("label {} out of range for {} classes", labels[r], z.cols()));
        }
        double row_max = z(r, 0);
        for (std::size_t c = 1; c < z.cols(); ++c) {
            row_max = std::max(row_max, z(r, c));
        }
        double denom = 0.0;
        for (std::size_t c = 0; c < z.cols(); ++c) {
            probs(r, c) = std::exp(z(r, c) - row_max);
            denom += probs(r, c);
        }
        for (std::size_t c = 0; c < z.cols(); ++c) {
            probs(r, c) /= denom;
        }
        loss += std::log(denom) - (z(r, labels[r]) - row_max);
    }
    Tape::Node n;
    n.kind = OpKind::softmax_cross_entropy;
    n.lhs = logits.index;
    n.value = Matrix(1, 1, loss / static_cast<double>(z.rows()));
    n.labels.assign(labels.begin(), labels.end());
    n.cache = std::move(probs);
    n.requires_grad = t.requires_grad(logits);
    return t.push(std::move(n));
}

Var frobenius_sq(Var a) {
    Tape& t = *a.tape;
    double total = 0.0;
    for (double v : t.value(a).data()) {
        total += v * v;
    }
    Tape::Node n;
    n.kind = OpKind::frobenius_sq;
    n.lhs = a.index;
    n.value = Matrix(1, 1, total);
    n.requires_grad = t.requires_grad(a);
    return t.push(std::move(n));
}

Var mean_abs_diff(Var a, Var b) {
    Tape& t = same_tape(a, b);
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    require_same_shape(av, bv, "mean_abs_diff");
    double total = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        total += std::abs(av.data()[i] - bv.data()[i]);
    }
    Tape::Node n;
    n.kind = OpKind::mean_abs_diff;
    n.lhs = a.index;
    n.rhs = b.index;
    n.value = Matrix(1, 1, total / static_cast<double>(av.size()));
    n.requires_grad = t.requires_grad(a) || t.requires_grad(b);
    return t.push(std::move(n));
}

Var exp_neg(Var x) {
    Tape& t = *x.tape;
    Tape::Node n;
    n.kind = OpKind::exp_neg;
    n.lhs = x.index;
    n.value = t.value(x);
    for (double& v : n.value.data()) {
        v = std::exp(-v);
    }
    n.requires_grad = t.requires_grad(x);
    return t.push(std::move(n));
}

void Tape::backward(Var root) {
    if (root.tape != this) {
        throw Error("backward root belongs to another tape");
    }
    const Matrix& rv = value(root);
    if (rv.rows() != 1 || rv.cols() != 1) {
        throw ShapeError(fmt::format("backward requires a scalar root, got {}", shape_str(rv)));
    }
    for (Node& n : nodes_) {
        n.grad = Matrix(n.value.rows(), n.value.cols());
    }
    has_grads_ = true;
    nodes_[root.index].grad(0, 0) = 1.0;
    for (std::size_t i = root.index + 1; i-- > 0;) {
        if (nodes_[i].requires_grad && nodes_[i].kind != OpKind::leaf) {
            backprop_node(i);
        }
    }
}

void Tape::accumulate(std::size_t index, const Matrix& g) {
    Node& target = nodes_[index];
    if (target.requires_grad) {
        target.grad += g;
    }
}

void Tape::backprop_node(std::size_t index) {
    const Node& n = nodes_[index];
    const Matrix& g = n.grad;
    switch (n.kind) {
    case OpKind::leaf:
        break;
    case OpKind::matmul: {
        const Matrix& a = nodes_[n.lhs].value;
        const Matrix& b = nodes_[n.rhs].value;
        if (nodes_[n.lhs].requires_grad) {
            accumulate(n.lhs, mslora::matmul(g, b.transposed()));
        }
        if (nodes_[n.rhs].requires_grad) {
            accumulate(n.rhs, mslora::matmul(a.transposed(), g));
        }
        break;
    }
    case OpKind::add:
        accumulate(n.lhs, g);
        accumulate(n.rhs, g);
        break;
    case OpKind::sub:
        accumulate(n.lhs, g);
        accumulate(n.rhs, -1.0 * g);
        break;
    case OpKind::scale:
        accumulate(n.lhs, n.scalar * g);
        break;
    case OpKind::transpose:
        accumulate(n.lhs, g.transposed());
        break;
    case OpKind::relu: {
        const Matrix& x = nodes_[n.lhs].value;
        Matrix gx = g;
        for (std::size_t i = 0; i < gx.size(); ++i) {
            if (!(x.data()[i] > 0.0)) {
                gx.data()[i] = 0.0;
            }
        }
        accumulate(n.lhs, gx);
        break;
    }
    case OpKind::add_col_bias: {
        accumulate(n.lhs, g);
        if (nodes_[n.rhs].requires_grad) {
            Matrix gb(g.rows(), 1);
            for (std::size_t r = 0; r < g.rows(); ++r) {
                for (std::size_t c = 0; c < g.cols(); ++c) {
                    gb(r, 0) += g(r, c);
                }
            }
            accumulate(n.rhs, gb);
        }
        break;
    }
    case OpKind::add_row_bias: {
        accumulate(n.lhs, g);
        if (nodes_[n.rhs].requires_grad) {
            Matrix gb(1, g.cols());
            for (std::size_t r = 0; r < g.rows(); ++r) {
                for (std::size_t c = 0; c < g.cols(); ++c) {
                    gb(0, c) += g(r, c);
                }
            }
            accumulate(n.rhs, gb);
        }
        break;
    }
    case OpKind::sum: {
        const Matrix& x = nodes_[n.lhs].value;
        accumulate(n.lhs, Matrix(x.rows(), x.cols(), g(0, 0)));
        break;
    }
    case OpKind::softmax_cross_entropy: {
        Matrix gz = n.cache;
        const double inv_rows = 1.0 / static_cast<double>(gz.rows());
        for (std::size_t r = 0; r < gz.rows(); ++r) {
            gz(r, n.labels[r]) -= 1.0;
            for (std::size_t c = 0; c < gz.cols(); ++c) {
                gz(r, c) *= inv_rows * g(0, 0);
            }
        }
        accumulate(n.lhs, gz);
        break;
    }
    case OpKind::frobenius_sq:
        accumulate(n.lhs, (2.0 * g(0, 0)) * nodes_[n.lhs].value);
        break;
    case OpKind::mean_abs_diff: {
        const Matrix& a = nodes_[n.lhs].value;
        const Matrix& b = nodes_[n.rhs].value;
        const double w = g(0, 0) / static_cast<double>(a.size());
        Matrix ga(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.size(); ++i) {
            ga.data()[i] = w * sign(a.data()[i] - b.data()[i]);
        }
        if (nodes_[n.rhs].requires_grad) {
            accumulate(n.rhs, -1.0 * ga);
        }
        accumulate(n.lhs, ga);
        break;
    }
    case OpKind::exp_neg: {
        Matrix gx = g;
        for (std::size_t i = 0; i < gx.size(); ++i) {
            gx.data()[i] *= -n.value.data()[i];
        }
        accumulate(n.lhs, gx);
        break;
    }
    }
}

} // namespace mslora
