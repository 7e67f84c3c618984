#include <doctest.h>

#include <cmath>

#include "quantlab/quantize.hpp"
#include "quantlab/rng.hpp"

using namespace quantlab;

TEST_CASE("fit_grid endpoints land on the grid") {
    const std::vector<double> vals = {0, 1, 2, 3};
    const auto [scale, zero] = fit_grid(vals, 2);
    CHECK(scale == 1.0f);
    CHECK(zero == 0.0f);
}

TEST_CASE("fit_grid degenerate group") {
    const std::vector<double> vals = {5, 5, 5, 5};
    for (int bits : {2, 4, 8}) {
        const auto [scale, zero] = fit_grid(vals, bits);
        CHECK(scale == 1.0f);
        CHECK(zero == 5.0f);
        // all codes 0, exact roundtrip
        CHECK(quant_code(5.0, scale, zero, (1 << bits) - 1) == 0);
        CHECK(dequant_value(0, scale, zero) == 5.0);
    }
}

TEST_CASE("fit_grid rejects bad input") {
    CHECK_THROWS_AS(fit_grid(std::vector<double>{}, 4), validation_error);
    CHECK_THROWS_AS(fit_grid(std::vector<double>{1.0, std::nan("")}, 4), validation_error);
}

TEST_CASE("fit_grid bound and endpoint property on random groups") {
    CounterRng rng(1234);
    for (uint64_t trial = 0; trial < 50; ++trial) {
        const int bits = trial % 3 == 0 ? 2 : trial % 3 == 1 ? 4 : 8;
        const int maxq = (1 << bits) - 1;
        std::vector<double> vals(16);
        double mn = 1e300, mx = -1e300;
        for (size_t i = 0; i < vals.size(); ++i) {
            vals[i] = (rng.uniform(trial * 100 + i) - 0.5) * 0.4;
            mn = std::min(mn, vals[i]);
            mx = std::max(mx, vals[i]);
        }
        const auto [scale, zero] = fit_grid(vals, bits);
        // grid endpoints equal group min/max up to f32 storage rounding
        CHECK(std::fabs(static_cast<double>(zero) - mn) <= 1e-6 * std::max(1.0, std::fabs(mn)));
        const double grid_max = dequant_value(maxq, scale, zero);
        CHECK(std::fabs(grid_max - mx) <= 1e-5 * std::max(1.0, std::fabs(mx)));
        // every value dequantizes to within half a step
        for (double v : vals) {
            const uint32_t c = quant_code(v, scale, zero, maxq);
            CHECK(std::fabs(v - dequant_value(c, scale, zero)) <=
                  static_cast<double>(scale) / 2.0 + 1e-9);
        }
    }
}

TEST_CASE("pack_codes pinned byte layouts") {
    CHECK(pack_codes({1, 2, 3, 0}, 2) == std::vector<uint8_t>{0x39});  // 0b00_11_10_01
    CHECK(pack_codes({0xA, 0x5}, 4) == std::vector<uint8_t>{0x5A});
    CHECK(pack_codes({0x7F}, 8) == std::vector<uint8_t>{0x7F});
    // partial byte zero-padded in the high bits
    CHECK(pack_codes({3, 3, 3}, 2) == std::vector<uint8_t>{0x3F});
}

TEST_CASE("pack_codes rejects overflowing codes") {
    CHECK_THROWS_AS(pack_codes({4}, 2), validation_error);
    CHECK_THROWS_AS(pack_codes({16}, 4), validation_error);
    CHECK_THROWS_AS(pack_codes({256}, 8), validation_error);
}

TEST_CASE("pack/unpack roundtrip fuzz") {
    CounterRng rng(777);
    uint64_t c = 0;
    for (uint64_t trial = 0; trial < 300; ++trial) {
        const int bits = trial % 3 == 0 ? 2 : trial % 3 == 1 ? 4 : 8;
        const size_t n = 1 + rng.below(c++, 40);
        std::vector<uint32_t> codes(n);
        for (auto& v : codes) v = static_cast<uint32_t>(rng.below(c++, 1u << bits));
        const auto bytes = pack_codes(codes, bits);
        CHECK(bytes.size() == (n * static_cast<size_t>(bits) + 7) / 8);
        CHECK(unpack_codes(bytes, bits, n) == codes);
    }
}

TEST_CASE("quantize_rtn pinned 2-bit example") {
    Matrix w(1, 4);
    w.data = {0, 1, 2, 3};
    const QuantizedTensor t = quantize_rtn(w, {2, 4});
    CHECK(unpack_codes(t.codes, 2, 4) == std::vector<uint32_t>{0, 1, 2, 3});
    const Matrix back = dequantize(t);
    for (size_t i = 0; i < 4; ++i) CHECK(back.data[i] == w.data[i]);
}

TEST_CASE("quantize_rtn is exact on an 8-bit-represented grid") {
    // integer values spanning 0..255: the fitted grid is scale 1 / zero 0,
    // exactly representable, so the roundtrip reproduces every value
    Matrix w(2, 16);
    for (size_t i = 0; i < w.size(); ++i) w.data[i] = static_cast<double>((i * 37) % 256);
    w.data[0] = 0.0;
    w.data[15] = 255.0;
    w.data[16] = 0.0;
    w.data[31] = 255.0;
    const QuantizedTensor t = quantize_rtn(w, {8, 16});
    CHECK(t.scales[0] == 1.0f);
    CHECK(t.zeros[0] == 0.0f);
    const Matrix back = dequantize(t);
    for (size_t i = 0; i < w.size(); ++i) CHECK(back.data[i] == w.data[i]);
}

TEST_CASE("quantize_rtn equals the brute-force nearest-grid assignment") {
    CounterRng rng(4242);
    for (uint64_t trial = 0; trial < 20; ++trial) {
        Matrix w(1, 8);
        for (size_t i = 0; i < 8; ++i) w.data[i] = (rng.uniform(trial * 8 + i) - 0.5) * 2.0;
        const QuantParams p{2, 8};
        const QuantizedTensor t = quantize_rtn(w, p);
        const auto codes = unpack_codes(t.codes, 2, 8);
        const Matrix back = dequantize(t);
        double total_sq = 0.0;
        for (size_t i = 0; i < 8; ++i) {
            // per-element error within half a step
            CHECK(std::fabs(w.data[i] - back.data[i]) <=
                  static_cast<double>(t.scales[0]) / 2.0 + 1e-9);
            // brute force over all 4 codes: the chosen one is the argmin
            double best = 1e300;
            uint32_t best_code = 0;
            for (uint32_t c = 0; c < 4; ++c) {
                const double err = std::fabs(w.data[i] - dequant_value(c, t.scales[0], t.zeros[0]));
                if (err < best) {
                    best = err;
                    best_code = c;
                }
            }
            CHECK(codes[i] == best_code);
            total_sq += best * best;
        }
        double got_sq = 0.0;
        for (size_t i = 0; i < 8; ++i)
            got_sq += (w.data[i] - back.data[i]) * (w.data[i] - back.data[i]);
        CHECK(got_sq == doctest::Approx(total_sq).epsilon(1e-12));
    }
}

TEST_CASE("rtn ties round half away from zero") {
    // grid: zero=0, scale=1 over values {0..3}; 0.5 must go up to code 1
    Matrix w(1, 4);
    w.data = {0.0, 0.5, 2.0, 3.0};
    const QuantizedTensor t = quantize_rtn(w, {2, 4});
    CHECK(t.scales[0] == 1.0f);
    CHECK(unpack_codes(t.codes, 2, 4)[1] == 1);
}

TEST_CASE("dequantize then requantize is idempotent on codes") {
    CounterRng rng(31);
    Matrix w(4, 24);
    for (size_t i = 0; i < w.size(); ++i) w.data[i] = (rng.uniform(i) - 0.3) * 3.0;
    for (int bits : {2, 4, 8}) {
        const QuantParams p{bits, 8};
        const QuantizedTensor t1 = quantize_rtn(w, p);
        const QuantizedTensor t2 = quantize_rtn(dequantize(t1), p);
        CHECK(t1.codes == t2.codes);
        CHECK(t1.scales == t2.scales);
        CHECK(t1.zeros == t2.zeros);
    }
}

TEST_CASE("quantized tensor validation catches corruption") {
    Matrix w(2, 8);
    for (size_t i = 0; i < w.size(); ++i) w.data[i] = static_cast<double>(i);
    QuantizedTensor t = quantize_rtn(w, {4, 8});
    QuantizedTensor bad = t;
    bad.codes.pop_back();
    CHECK_THROWS_AS(dequantize(bad), validation_error);
    bad = t;
    bad.scales[0] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(dequantize(bad), validation_error);
    bad = t;
    bad.scales.pop_back();
    CHECK_THROWS_AS(dequantize(bad), validation_error);
}

TEST_CASE("bit widths outside {2,4,8} are rejected") {
    Matrix w(1, 4, 0.5);
    CHECK_THROWS_AS(quantize_rtn(w, {3, 4}), validation_error);
    CHECK_THROWS_AS(quantize_rtn(w, {4, 0}), validation_error);
}
