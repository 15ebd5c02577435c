#include "osr/matrix.hpp"

namespace osr {

Matrix matmul(const Matrix& a, const Matrix& b) {
    require(a.cols == b.rows, "matmul: inner dimensions differ");
    Matrix c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + static_cast<std::size_t>(i) * a.cols;
        double* crow = c.data.data() + static_cast<std::size_t>(i) * c.cols;
        for (int k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = b.data.data() + static_cast<std::size_t>(k) * b.cols;
            for (int j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

Matrix matmul_at_b(const Matrix& a, const Matrix& b) {
    require(a.rows == b.rows, "matmul_at_b: row counts differ");
    Matrix c(a.cols, b.cols);
    for (int k = 0; k < a.rows; ++k) {
        const double* arow = a.data.data() + static_cast<std::size_t>(k) * a.cols;
        const double* brow = b.data.data() + static_cast<std::size_t>(k) * b.cols;
        for (int i = 0; i < a.cols; ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            double* crow = c.data.data() + static_cast<std::size_t>(i) * c.cols;
            for (int j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
        }
    }
    return c;
}

Matrix matmul_a_bt(const Matrix& a, const Matrix& b) {
    require(a.cols == b.cols, "matmul_a_bt: column counts differ");
    Matrix c(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + static_cast<std::size_t>(i) * a.cols;
        double* crow = c.data.data() + static_cast<std::size_t>(i) * c.cols;
        for (int j = 0; j < b.rows; ++j) {
            const double* brow = b.data.data() + static_cast<std::size_t>(j) * b.cols;
            double s = 0.0;
            for (int k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
            crow[j] = s;
        }
    }
    return c;
}

}  // namespace osr
