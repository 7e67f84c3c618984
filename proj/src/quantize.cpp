#include "quantlab/quantize.hpp"

#include <cmath>
#include <string>

namespace quantlab {

void QuantParams::validate() const {
    if (bits != 2 && bits != 4 && bits != 8)
        throw validation_error("quant: bits must be 2, 4, or 8 (got " + std::to_string(bits) +
                               ")");
    if (group_size < 1) throw validation_error("quant: group_size must be >= 1");
}

std::pair<float, float> fit_grid(std::span<const double> values, int bits) {
    if (values.empty()) throw validation_error("fit_grid: empty group");
    double mn = values[0], mx = values[0];
    for (double v : values) {
        if (!std::isfinite(v)) throw validation_error("fit_grid: non-finite value");
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    if (mx == mn) return {1.0f, static_cast<float>(mn)};
    const int maxq = (1 << bits) - 1;
    const auto scale = static_cast<float>((mx - mn) / static_cast<double>(maxq));
    if (scale == 0.0f) return {1.0f, static_cast<float>(mn)};  // f32 underflow
    return {scale, static_cast<float>(mn)};
}

uint32_t quant_code(double w, float scale, float zero, int maxq) {
    const double t = (w - static_cast<double>(zero)) / static_cast<double>(scale);
    double r = std::round(t);  // ties away from zero
    if (r < 0.0) r = 0.0;
    if (r > static_cast<double>(maxq)) r = static_cast<double>(maxq);
    return static_cast<uint32_t>(r);
}

std::vector<uint8_t> pack_codes(const std::vector<uint32_t>& codes, int bits) {
    if (bits != 2 && bits != 4 && bits != 8)
        throw validation_error("pack_codes: bits must be 2, 4, or 8");
    const uint32_t limit = 1u << bits;
    const size_t per_byte = 8 / static_cast<size_t>(bits);
    std::vector<uint8_t> out((codes.size() + per_byte - 1) / per_byte, 0);
    for (size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] >= limit)
            throw validation_error("pack_codes: code " + std::to_string(codes[i]) +
                                   " overflows " + std::to_string(bits) + " bits");
        const size_t shift = (i % per_byte) * static_cast<size_t>(bits);
        out[i / per_byte] |= static_cast<uint8_t>(codes[i] << shift);
    }
    return out;
}

std::vector<uint32_t> unpack_codes(const std::vector<uint8_t>& bytes, int bits, size_t n) {
    if (bits != 2 && bits != 4 && bits != 8)
        throw validation_error("unpack_codes: bits must be 2, 4, or 8");
    const size_t per_byte = 8 / static_cast<size_t>(bits);
    if (bytes.size() * per_byte < n)
        throw validation_error("unpack_codes: byte buffer too short");
    const uint32_t mask = (1u << bits) - 1;
    std::vector<uint32_t> codes(n);
    for (size_t i = 0; i < n; ++i) {
        const size_t shift = (i % per_byte) * static_cast<size_t>(bits);
        codes[i] = (bytes[i / per_byte] >> shift) & mask;
    }
    return codes;
}

QuantizedTensor quantize_rtn(const Matrix& w, const QuantParams& p) {
    p.validate();
    if (!w.all_finite()) throw validation_error("quantize_rtn: non-finite weights");
    QuantizedTensor t;
    t.rows = w.rows;
    t.cols = w.cols;
    t.bits = p.bits;
    t.group_size = p.group_size;
    const size_t gpr = t.groups_per_row();
    t.scales.resize(w.rows * gpr);
    t.zeros.resize(w.rows * gpr);
    std::vector<uint32_t> codes(w.rows * w.cols);
    const int maxq = p.maxq();
    for (size_t r = 0; r < w.rows; ++r) {
        for (size_t g = 0; g < gpr; ++g) {
            const size_t c0 = g * p.group_size;
            const size_t c1 = std::min(w.cols, c0 + p.group_size);
            const auto [scale, zero] =
                fit_grid(std::span<const double>(w.row(r) + c0, c1 - c0), p.bits);
            t.scales[r * gpr + g] = scale;
            t.zeros[r * gpr + g] = zero;
            for (size_t c = c0; c < c1; ++c)
                codes[r * w.cols + c] = quant_code(w.at(r, c), scale, zero, maxq);
        }
    }
    t.codes = pack_codes(codes, p.bits);
    return t;
}

Matrix dequantize(const QuantizedTensor& t) {
    validate_quantized(t);
    const auto codes = unpack_codes(t.codes, t.bits, t.n_codes());
    const size_t gpr = t.groups_per_row();
    Matrix w(t.rows, t.cols);
    for (size_t r = 0; r < t.rows; ++r)
        for (size_t c = 0; c < t.cols; ++c) {
            const size_t g = r * gpr + c / t.group_size;
            w.at(r, c) = dequant_value(codes[r * t.cols + c], t.scales[g], t.zeros[g]);
        }
    return w;
}

void validate_quantized(const QuantizedTensor& t) {
    QuantParams p{t.bits, t.group_size};
    p.validate();
    const size_t per_byte = 8 / static_cast<size_t>(t.bits);
    const size_t expect_bytes = (t.n_codes() + per_byte - 1) / per_byte;
    if (t.codes.size() != expect_bytes)
        throw validation_error("quantized tensor: packed code length mismatch");
    const size_t n_groups = t.rows * t.groups_per_row();
    if (t.scales.size() != n_groups || t.zeros.size() != n_groups)
        throw validation_error("quantized tensor: scale/zero length mismatch");
    for (size_t i = 0; i < n_groups; ++i)
        if (!std::isfinite(t.scales[i]) || !std::isfinite(t.zeros[i]))
            throw validation_error("quantized tensor: non-finite grid parameters");
}

}  // namespace quantlab
