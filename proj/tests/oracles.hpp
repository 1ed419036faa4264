// SPDX-License-Identifier: Apache-2.0
// Reference computations that share no code with the library under test.
#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <unistd.h>

#include "mslora/lora.hpp"
#include "mslora/matrix.hpp"
#include "mslora/taskgen.hpp"

namespace oracle {

using mslora::Matrix;

inline Matrix triple_loop(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) {
                s += a(i, k) * b(k, j);
            }
            c(i, j) = s;
        }
    }
    return c;
}

/// (W + sum_i m_i s_i A_i B_i) h + bias, merged densely before multiplying.
inline Matrix dense_merge_forward(const mslora::BranchStack& stack, const Matrix& h) {
    Matrix w = stack.weight();
    const auto& mask = stack.mask();
    const auto branches = stack.branches();
    for (std::size_t i = 0; i < branches.size(); ++i) {
        if (mask[i] == 0) {
            continue;
        }
        const Matrix d = triple_loop(branches[i].a, branches[i].b);
        for (std::size_t k = 0; k < w.size(); ++k) {
            w.data()[k] += branches[i].scale * d.data()[k];
        }
    }
    Matrix out = triple_loop(w, h);
    for (std::size_t r = 0; r < out.rows(); ++r) {
        for (std::size_t c = 0; c < out.cols(); ++c) {
            out(r, c) += stack.bias()(r, 0);
        }
    }
    return out;
}

/// Sum of squared entries of M^T M - I (or M M^T - I when `rows`).
inline double gram_defect(const Matrix& m, bool rows) {
    const Matrix g = rows ? triple_loop(m, m.transposed()) : triple_loop(m.transposed(), m);
    double s = 0.0;
    for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t j = 0; j < g.cols(); ++j) {
            const double v = g(i, j) - (i == j ? 1.0 : 0.0);
            s += v * v;
        }
    }
    return s;
}

/// Multinomial logistic regression fit by full-batch gradient descent on the
/// train split; returns accuracy on the test split.
inline double logistic_regression_accuracy(const mslora::LabeledDataset& data, int iterations = 2000,
                                           double lr = 0.05) {
    const std::size_t d = data.dim();
    const std::size_t C = data.class_count;
    // Standardize with train statistics.
    std::vector<double> mean(d, 0.0), sd(d, 0.0);
    for (std::size_t idx : data.train) {
        for (std::size_t f = 0; f < d; ++f) {
            mean[f] += data.features(f, idx);
        }
    }
    for (auto& m : mean) {
        m /= static_cast<double>(data.train.size());
    }
    for (std::size_t idx : data.train) {
        for (std::size_t f = 0; f < d; ++f) {
            const double v = data.features(f, idx) - mean[f];
            sd[f] += v * v;
        }
    }
    for (auto& s : sd) {
        s = std::sqrt(s / static_cast<double>(data.train.size())) + 1e-12;
    }
    auto feature = [&](std::size_t idx, std::size_t f) { return (data.features(f, idx) - mean[f]) / sd[f]; };

    std::vector<double> w(C * (d + 1), 0.0);
    std::vector<double> grad(w.size());
    std::vector<double> p(C);
    for (int it = 0; it < iterations; ++it) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t idx : data.train) {
            double mx = -1e300;
            for (std::size_t c = 0; c < C; ++c) {
                double z = w[c * (d + 1) + d];
                for (std::size_t f = 0; f < d; ++f) {
                    z += w[c * (d + 1) + f] * feature(idx, f);
                }
                p[c] = z;
                mx = std::max(mx, z);
            }
            double norm = 0.0;
            for (auto& v : p) {
                v = std::exp(v - mx);
                norm += v;
            }
            for (std::size_t c = 0; c < C; ++c) {
                const double g = p[c] / norm - (data.labels[idx] == c ? 1.0 : 0.0);
                for (std::size_t f = 0; f < d; ++f) {
                    grad[c * (d + 1) + f] += g * feature(idx, f);
                }
                grad[c * (d + 1) + d] += g;
            }
        }
        for (std::size_t k = 0; k < w.size(); ++k) {
            w[k] -= lr * grad[k] / static_cast<double>(data.train.size());
        }
    }
    std::size_t correct = 0;
    for (std::size_t idx : data.test) {
        std::size_t best = 0;
        double best_z = -1e300;
        for (std::size_t c = 0; c < C; ++c) {
            double z = w[c * (d + 1) + d];
            for (std::size_t f = 0; f < d; ++f) {
                z += w[c * (d + 1) + f] * feature(idx, f);
            }
            if (z > best_z) {
                best_z = z;
                best = c;
            }
        }
        correct += best == data.labels[idx] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(data.test.size());
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("mslora_test_" + std::to_string(::getpid()) + "_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace oracle
