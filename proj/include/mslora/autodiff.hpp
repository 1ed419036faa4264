// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <string_view>
#include <vector>

#include "mslora/matrix.hpp"

namespace mslora {

class Tape;

enum class OpKind {
    leaf,
    matmul,
    add,
    sub,
    scale,
    transpose,
    relu,
    add_col_bias,
    add_row_bias,
    sum,
    softmax_cross_entropy,
    frobenius_sq,
    mean_abs_diff,
    exp_neg,
};

std::string_view op_name(OpKind kind);

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
struct Var {
    Tape* tape = nullptr;
    std::size_t index = std::numeric_limits<std::size_t>::max();

    bool valid() const noexcept { return tape != nullptr; }
    const Matrix& value() const;
    const Matrix& grad() const;
    double scalar() const;
};

/// Single-use reverse-mode tape. Nodes are appended in evaluation order, so the
/// node vector is already topologically sorted.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    /// Parameters and inputs. Leaves without `requires_grad` are constants:
    /// gradient never propagates into them and their grad stays zero.
    Var leaf(Matrix value, bool requires_grad);
    Var constant(Matrix value) { return leaf(std::move(value), false); }
    Var parameter(Matrix value) { return leaf(std::move(value), true); }

    const Matrix& value(Var v) const { return nodes_.at(v.index).value; }
    const Matrix& grad(Var v) const;
    bool requires_grad(Var v) const { return nodes_.at(v.index).requires_grad; }
    OpKind kind(Var v) const { return nodes_.at(v.index).kind; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Populates d(root)/d(node) for every node. Root must be 1x1.
    void backward(Var root);

private:
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

    struct Node {
        OpKind kind = OpKind::leaf;
        std::size_t lhs = npos;
        std::size_t rhs = npos;
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        double scalar = 0.0;
        std::vector<std::size_t> labels;
        Matrix cache;
    };

    Var push(Node node);
    Node& node(Var v) { return nodes_.at(v.index); }
    const Node& node(Var v) const { return nodes_.at(v.index); }
    void backprop_node(std::size_t index);
    void accumulate(std::size_t index, const Matrix& g);

    std::vector<Node> nodes_;
    bool has_grads_ = false;

    friend Var matmul(Var, Var);
    friend Var add(Var, Var);
    friend Var sub(Var, Var);
    friend Var scale(Var, double);
    friend Var transpose(Var);
    friend Var relu(Var);
    friend Var add_col_bias(Var, Var);
    friend Var add_row_bias(Var, Var);
    friend Var sum(Var);
    friend Var softmax_cross_entropy(Var, std::span<const std::size_t>);
    friend Var frobenius_sq(Var);
    friend Var mean_abs_diff(Var, Var);
    friend Var exp_neg(Var);
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
Var transpose(Var a);
Var relu(Var a);
/// x (r x c) plus a column vector (r x 1) broadcast across columns.
Var add_col_bias(Var x, Var bias);
/// x (r x c) plus a row vector (1 x c) broadcast across rows.
Var add_row_bias(Var x, Var bias);
Var sum(Var a);
/// Mean over rows of -log softmax(row)[label]. One label per row.
Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels);
Var frobenius_sq(Var a);
/// Manhattan distance normalized by element count.
Var mean_abs_diff(Var a, Var b);
/// Elementwise exp(-x).
Var exp_neg(Var x);

} // namespace mslora
