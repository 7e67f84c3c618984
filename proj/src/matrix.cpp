#include "quantlab/matrix.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "quantlab/rng.hpp"

namespace quantlab {

Matrix Matrix::identity(size_t n) {
    Matrix m(n, n);
    for (size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

bool Matrix::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows)
        throw validation_error("matmul: dimension mismatch (" + std::to_string(a.rows) + "x" +
                               std::to_string(a.cols) + " * " + std::to_string(b.rows) + "x" +
                               std::to_string(b.cols) + ")");
    Matrix c(a.rows, b.cols);
    const size_t n = b.cols;
    parallel_for(a.rows, [&](size_t r0, size_t r1) {
        for (size_t i = r0; i < r1; ++i) {
            double* crow = c.row(i);
            const double* arow = a.row(i);
            for (size_t k = 0; k < a.cols; ++k) {
                const double aik = arow[k];
                const double* brow = b.row(k);
                for (size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
            }
        }
    });
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows)
        throw validation_error("matmul_tn: dimension mismatch");
    Matrix c(a.cols, b.cols);
    const size_t n = b.cols;
    // contraction over a.rows; split output rows so each is owned by one worker
    parallel_for(a.cols, [&](size_t j0, size_t j1) {
        for (size_t k = 0; k < a.rows; ++k) {
            const double* arow = a.row(k);
            const double* brow = b.row(k);
            for (size_t j = j0; j < j1; ++j) {
                double* crow = c.row(j);
                const double akj = arow[j];
                for (size_t i = 0; i < n; ++i) crow[i] += akj * brow[i];
            }
        }
    });
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols)
        throw validation_error("matmul_nt: dimension mismatch");
    Matrix c(a.rows, b.rows);
    parallel_for(a.rows, [&](size_t r0, size_t r1) {
        for (size_t i = r0; i < r1; ++i) {
            const double* arow = a.row(i);
            double* crow = c.row(i);
            for (size_t j = 0; j < b.rows; ++j) {
                const double* brow = b.row(j);
                double s = 0.0;
                for (size_t k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
                crow[j] = s;
            }
        }
    });
    return c;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols, a.rows);
    for (size_t i = 0; i < a.rows; ++i)
        for (size_t j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

Matrix cholesky_lower(const Matrix& a) {
    if (a.rows != a.cols) throw validation_error("cholesky: matrix not square");
    const size_t n = a.rows;
    double max_entry = 0.0, max_asym = 0.0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) {
            max_entry = std::max(max_entry, std::fabs(a.at(i, j)));
            max_asym = std::max(max_asym, std::fabs(a.at(i, j) - a.at(j, i)));
        }
    if (max_asym > 1e-9 * std::max(max_entry, 1e-300))
        throw validation_error("cholesky: matrix not symmetric");

    Matrix l(n, n);
    for (size_t j = 0; j < n; ++j) {
        double d = a.at(j, j);
        for (size_t k = 0; k < j; ++k) d -= l.at(j, k) * l.at(j, k);
        if (!(d > 0.0))
            throw numerical_error("cholesky: not positive definite at column " +
                                  std::to_string(j));
        const double ljj = std::sqrt(d);
        l.at(j, j) = ljj;
        for (size_t i = j + 1; i < n; ++i) {
            double s = a.at(i, j);
            for (size_t k = 0; k < j; ++k) s -= l.at(i, k) * l.at(j, k);
            l.at(i, j) = s / ljj;
        }
    }
    return l;
}

Matrix solve_spd(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) throw validation_error("solve_spd: dimension mismatch");
    const Matrix l = cholesky_lower(a);
    const size_t n = a.rows;
    const size_t m = b.cols;
    // forward substitution: L * Y = B
    Matrix y(n, m);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < m; ++j) {
            double s = b.at(i, j);
            for (size_t k = 0; k < i; ++k) s -= l.at(i, k) * y.at(k, j);
            y.at(i, j) = s / l.at(i, i);
        }
    }
    // back substitution: L^T * X = Y
    Matrix x(n, m);
    for (size_t ii = n; ii > 0; --ii) {
        const size_t i = ii - 1;
        for (size_t j = 0; j < m; ++j) {
            double s = y.at(i, j);
            for (size_t k = i + 1; k < n; ++k) s -= l.at(k, i) * x.at(k, j);
            x.at(i, j) = s / l.at(i, i);
        }
    }
    return x;
}

Matrix seeded_normal(size_t rows, size_t cols, double mean, double std, uint64_t seed) {
    if (std < 0.0) throw validation_error("seeded_normal: std must be >= 0");
    Matrix m(rows, cols);
    CounterRng rng(seed);
    for (size_t i = 0; i < m.size(); ++i) m.data[i] = mean + std * rng.normal(i);
    return m;
}

double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

double max_abs(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data) s = std::max(s, std::fabs(v));
    return s;
}

}  // namespace quantlab
