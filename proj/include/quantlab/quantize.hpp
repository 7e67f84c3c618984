#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "quantlab/matrix.hpp"

namespace quantlab {

// Asymmetric min-max grid. Groups partition each weight row along the input
// dimension (columns); one f32 (scale, zero) pair per group, and
// dequant = code * scale + zero.
struct QuantParams {
    int bits = 4;             // 2, 4, or 8
    size_t group_size = 32;

    void validate() const;
    int maxq() const { return (1 << bits) - 1; }
};

struct QuantizedTensor {
    size_t rows = 0;
    size_t cols = 0;
    int bits = 4;
    size_t group_size = 32;
    std::vector<uint8_t> codes;  // packed LSB-first, row-major code stream
    std::vector<float> scales;   // rows * groups_per_row, row-major by group
    std::vector<float> zeros;

    size_t groups_per_row() const { return (cols + group_size - 1) / group_size; }
    size_t n_codes() const { return rows * cols; }
};

// Grid fit for one group: zero = min, scale = (max-min)/maxq; a constant
// group gets scale 1 / zero min so all codes are 0 and the roundtrip is
// exact. Returned values are the f32 the tensor stores; all code selection
// happens against these stored values, not the pre-rounding doubles.
std::pair<float, float> fit_grid(std::span<const double> values, int bits);

// Code for one weight on a stored grid: nearest integer (ties away from
// zero), clamped to [0, maxq].
uint32_t quant_code(double w, float scale, float zero, int maxq);

// f32-exact dequantization of one code.
inline double dequant_value(uint32_t code, float scale, float zero) {
    return static_cast<double>(static_cast<float>(
        static_cast<double>(code) * static_cast<double>(scale) + static_cast<double>(zero)));
}

// LSB-first packing: q2 holds 4 codes/byte, q4 holds 2, q8 holds 1; the final
// partial byte is zero-padded in its high bits.
std::vector<uint8_t> pack_codes(const std::vector<uint32_t>& codes, int bits);
std::vector<uint32_t> unpack_codes(const std::vector<uint8_t>& bytes, int bits, size_t n);

// Per-group grid fit followed by independent nearest-code rounding.
QuantizedTensor quantize_rtn(const Matrix& w, const QuantParams& p);

Matrix dequantize(const QuantizedTensor& t);

void validate_quantized(const QuantizedTensor& t);

}  // namespace quantlab
