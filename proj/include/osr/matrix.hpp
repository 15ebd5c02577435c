#pragma once

#include <initializer_list>
#include <span>
#include <vector>

#include "osr/common.hpp"

namespace osr {

/// Dense row-major matrix of doubles. Deliberately small: just what the
/// sequential MLPs and the tabular pipeline need.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0)
        : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rs) {
        Matrix m(static_cast<int>(rs.size()), rs.size() ? static_cast<int>(rs.begin()->size()) : 0);
        int i = 0;
        for (const auto& r : rs) {
            require(static_cast<int>(r.size()) == m.cols, "Matrix::from_rows: ragged rows");
            int j = 0;
            for (double v : r) m(i, j++) = v;
            ++i;
        }
        return m;
    }

    double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

    std::span<double> row(int r) { return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }
    std::span<const double> row(int r) const { return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }

    Vec row_copy(int r) const { return Vec(row(r).begin(), row(r).end()); }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

/// C = A * B
Matrix matmul(const Matrix& a, const Matrix& b);
/// C = A^T * B  (e.g. weight gradient  dW = X^T G)
Matrix matmul_at_b(const Matrix& a, const Matrix& b);
/// C = A * B^T  (e.g. input gradient  dX = G W^T)
Matrix matmul_a_bt(const Matrix& a, const Matrix& b);

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

}  // namespace osr
