// SPDX-License-Identifier: Apache-2.0
#include "mslora/matrix.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include <fmt/format.h>

#include "mslora/errors.hpp"

namespace mslora {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw ShapeError(fmt::format("matrix data length {} does not match {}x{}", data_.size(), rows, cols));
    }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw ShapeError("ragged initializer for matrix");
        }
        data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r) {
        for (std::size_t c = 0; c < cols_; ++c) {
            t(c, r) = (*this)(r, c);
        }
    }
    return t;
}

Matrix Matrix::column(std::size_t c) const {
    Matrix col(rows_, 1);
    for (std::size_t r = 0; r < rows_; ++r) {
        col(r, 0) = (*this)(r, c);
    }
    return col;
}

void Matrix::fill(double value) {
    std::fill(data_.begin(), data_.end(), value);
}

bool Matrix::bitwise_equal(const Matrix& other) const noexcept {
    return same_shape(other) &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
}

std::string shape_str(const Matrix& m) {
    return fmt::format("{}x{}", m.rows(), m.cols());
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError(fmt::format("matmul shape mismatch: {} * {}", shape_str(a), shape_str(b)));
    }
    Matrix out(a.rows(), b.cols());
    const std::size_t n = a.cols();
    const std::size_t m = b.cols();
    auto ad = a.data();
    auto bd = b.data();
    auto od = out.data();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* orow = od.data() + i * m;
        for (std::size_t k = 0; k < n; ++k) {
            const double aik = ad[i * n + k];
            const double* brow = bd.data() + k * m;
            for (std::size_t j = 0; j < m; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    return out;
}

namespace {
void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(fmt::format("{} shape mismatch: {} vs {}", op, shape_str(a), shape_str(b)));
    }
}
} // namespace

Matrix operator+(const Matrix& a, const Matrix& b) {
    Matrix out = a;
    out += b;
    return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "sub");
    Matrix out = a;
    auto od = out.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < od.size(); ++i) {
        od[i] -= bd[i];
    }
    return out;
}

Matrix operator*(double s, const Matrix& a) {
    Matrix out = a;
    for (double& v : out.data()) {
        v *= s;
    }
    return out;
}

Matrix& operator+=(Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "add");
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < ad.size(); ++i) {
        ad[i] += bd[i];
    }
    return a;
}

double max_abs(const Matrix& m) {
    double best = 0.0;
    for (double v : m.data()) {
        best = std::max(best, std::abs(v));
    }
    return best;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    double best = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        best = std::max(best, std::abs(a.data()[i] - b.data()[i]));
    }
    return best;
}

bool all_finite(const Matrix& m) {
    for (double v : m.data()) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

std::uint64_t content_hash(const Matrix& m, std::uint64_t seed) {
    constexpr std::uint64_t prime = 0x100000001b3ULL;
    std::uint64_t h = seed;
    auto mix = [&](std::uint64_t word) {
        for (int i = 0; i < 8; ++i) {
            h ^= (word >> (8 * i)) & 0xffU;
            h *= prime;
        }
    };
    mix(m.rows());
    mix(m.cols());
    for (double v : m.data()) {
        mix(std::bit_cast<std::uint64_t>(v));
    }
    return h;
}

std::uint64_t content_hash(const Matrix& m) {
    return content_hash(m, 0xcbf29ce484222325ULL);
}

} // namespace mslora
