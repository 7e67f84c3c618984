#pragma once

#include <cstddef>
#include <vector>

#include "quantlab/common.hpp"

namespace quantlab {

// Dense row-major matrix of doubles. All quantization and Hessian math runs
// in 64-bit; 32-bit is only a storage format (checkpoints, quant metadata).
struct Matrix {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(size_t r, size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& at(size_t r, size_t c) { return data[r * cols + c]; }
    double at(size_t r, size_t c) const { return data[r * cols + c]; }

    double* row(size_t r) { return data.data() + r * cols; }
    const double* row(size_t r) const { return data.data() + r * cols; }

    size_t size() const { return data.size(); }

    static Matrix identity(size_t n);

    bool all_finite() const;
};

// C = A * B. Fixed summation order: every element accumulates its k-terms in
// ascending k, independent of thread count.
Matrix matmul(const Matrix& a, const Matrix& b);

// C = A^T * B, same ordering guarantee (contraction over A's rows, ascending).
Matrix matmul_tn(const Matrix& a, const Matrix& b);

// C = A * B^T (row-dot-row form; no transpose materialized).
Matrix matmul_nt(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);

// Lower-triangular L with L * L^T = A. A must be symmetric positive definite;
// symmetry is checked to 1e-9 * ||A||_inf, a non-positive pivot throws
// numerical_error naming the failing column. No pivoting: callers guarantee
// SPD via damping.
Matrix cholesky_lower(const Matrix& a);

// Solves A * X = B for SPD A via cholesky_lower and two triangular solves.
Matrix solve_spd(const Matrix& a, const Matrix& b);

// Deterministic seeded Gaussian fill (see CounterRng for the construction).
Matrix seeded_normal(size_t rows, size_t cols, double mean, double std, uint64_t seed);

double frobenius_norm(const Matrix& a);
double max_abs(const Matrix& a);

}  // namespace quantlab
