#pragma once

#include "quantlab/quantize.hpp"

namespace quantlab {

// H = 2 X X^T + lambda I over calibration inputs X (input-dim x samples).
// lambda = damp_frac * mean(diag(2 X X^T)); dead input dims (zero diagonal)
// are set to 1 before damping, so X = 0 yields exactly the identity.
Matrix build_hessian(const Matrix& x_calib, double damp_frac = 0.01);

struct GptqResult {
    QuantizedTensor tensor;
    double recon_error = 0.0;  // squared layer-output error over the
                               // calibration distribution encoded by H
};

// Column-sequential quantization with error feedback: with U the upper
// Cholesky factor of H^-1, columns are quantized in natural order; each
// column's rounding error e = (w - dq)/U[j,j] is pushed into the still
// unquantized columns via w[:,k] -= e * U[j,k]. Group grids are refit at
// every group boundary from the error-updated weights. A diagonal H has no
// feedback, which makes the result bit-identical to quantize_rtn.
GptqResult quantize_gptq(const Matrix& w, const Matrix& h, const QuantParams& p);

// 1/2 * trace((W - What) H (W - What)^T): the squared reconstruction error
// ||W X - What X||_F^2 over the effective calibration encoded by H.
double reconstruction_error(const Matrix& w, const Matrix& w_hat, const Matrix& h);

// reconstruction_error normalized by the reference output energy
// 1/2 * trace(W H W^T).
double relative_reconstruction_error(const Matrix& w, const Matrix& w_hat, const Matrix& h);

}  // namespace quantlab
