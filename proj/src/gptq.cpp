#include "quantlab/gptq.hpp"

#include <cmath>
#include <limits>

namespace quantlab {

Matrix build_hessian(const Matrix& x_calib, double damp_frac) {
    if (x_calib.cols < 1) throw validation_error("build_hessian: zero calibration samples");
    if (!(damp_frac >= 0.0)) throw validation_error("build_hessian: damp_frac must be >= 0");
    const size_t d = x_calib.rows;
    Matrix h = matmul_nt(x_calib, x_calib);
    for (double& v : h.data) v *= 2.0;
    double diag_mean = 0.0;
    for (size_t i = 0; i < d; ++i) diag_mean += h.at(i, i);
    diag_mean /= static_cast<double>(d);
    const double lambda = damp_frac * diag_mean;
    for (size_t i = 0; i < d; ++i) {
        if (h.at(i, i) == 0.0) h.at(i, i) = 1.0;  // dead input dim
        h.at(i, i) += lambda;
    }
    return h;
}

GptqResult quantize_gptq(const Matrix& w, const Matrix& h, const QuantParams& p) {
    p.validate();
    if (h.rows != h.cols || h.rows != w.cols)
        throw validation_error("quantize_gptq: Hessian side must equal weight input dim");
    if (!w.all_finite()) throw validation_error("quantize_gptq: non-finite weights");

    // U = upper Cholesky factor of H^-1 (so H^-1 = U^T U)
    Matrix hinv = solve_spd(h, Matrix::identity(h.rows));
    for (size_t i = 0; i < hinv.rows; ++i)
        for (size_t j = i + 1; j < hinv.cols; ++j) {
            const double s = 0.5 * (hinv.at(i, j) + hinv.at(j, i));
            hinv.at(i, j) = s;
            hinv.at(j, i) = s;
        }
    const Matrix u = transpose(cholesky_lower(hinv));

    const size_t rows = w.rows, cols = w.cols;
    QuantizedTensor t;
    t.rows = rows;
    t.cols = cols;
    t.bits = p.bits;
    t.group_size = p.group_size;
    const size_t gpr = t.groups_per_row();
    t.scales.resize(rows * gpr);
    t.zeros.resize(rows * gpr);

    Matrix work = w;  // error-updated weights
    std::vector<uint32_t> codes(rows * cols);
    std::vector<double> err(rows);
    const int maxq = p.maxq();

    for (size_t j = 0; j < cols; ++j) {
        if (j % p.group_size == 0) {
            const size_t g = j / p.group_size;
            const size_t c1 = std::min(cols, j + p.group_size);
            for (size_t r = 0; r < rows; ++r) {
                const auto [scale, zero] =
                    fit_grid(std::span<const double>(work.row(r) + j, c1 - j), p.bits);
                t.scales[r * gpr + g] = scale;
                t.zeros[r * gpr + g] = zero;
            }
        }
        const size_t g = j / p.group_size;
        const double ujj = u.at(j, j);
        for (size_t r = 0; r < rows; ++r) {
            const float scale = t.scales[r * gpr + g];
            const float zero = t.zeros[r * gpr + g];
            const uint32_t c = quant_code(work.at(r, j), scale, zero, maxq);
            const double dq = dequant_value(c, scale, zero);
            codes[r * cols + j] = c;
            err[r] = (work.at(r, j) - dq) / ujj;
            work.at(r, j) = dq;
        }
        const double* urow = u.row(j);
        parallel_for(rows, [&](size_t r0, size_t r1) {
            for (size_t r = r0; r < r1; ++r) {
                double* wrow = work.row(r);
                const double e = err[r];
                for (size_t k = j + 1; k < cols; ++k) wrow[k] -= e * urow[k];
            }
        });
    }

    t.codes = pack_codes(codes, p.bits);
    GptqResult result;
    result.recon_error = reconstruction_error(w, dequantize(t), h);
    result.tensor = std::move(t);
    return result;
}

double reconstruction_error(const Matrix& w, const Matrix& w_hat, const Matrix& h) {
    if (w.rows != w_hat.rows || w.cols != w_hat.cols || h.rows != w.cols)
        throw validation_error("reconstruction_error: dimension mismatch");
    Matrix delta = w;
    for (size_t i = 0; i < delta.size(); ++i) delta.data[i] -= w_hat.data[i];
    const Matrix dh = matmul(delta, h);
    double tr = 0.0;
    for (size_t i = 0; i < delta.size(); ++i) tr += dh.data[i] * delta.data[i];
    return 0.5 * tr;
}

double relative_reconstruction_error(const Matrix& w, const Matrix& w_hat, const Matrix& h) {
    const Matrix wh = matmul(w, h);
    double ref = 0.0;
    for (size_t i = 0; i < w.size(); ++i) ref += wh.data[i] * w.data[i];
    ref *= 0.5;
    const double err = reconstruction_error(w, w_hat, h);
    if (ref <= 0.0) return err == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return err / ref;
}

}  // namespace quantlab
