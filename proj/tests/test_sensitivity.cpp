#include <doctest.h>

#include <cmath>

#include "quantlab/evalharness.hpp"
#include "quantlab/rng.hpp"
#include "quantlab/sensitivity.hpp"

using namespace quantlab;

namespace {

ModelConfig scfg() {
    ModelConfig cfg;
    cfg.vocab_size = 259;
    cfg.d_model = 16;
    cfg.n_layers = 3;
    cfg.n_heads = 2;
    cfg.d_ff = 24;
    cfg.max_seq = 32;
    return cfg;
}

std::vector<TokenSeq> probe_seqs() {
    return sample_calibration(make_synthetic_corpus(1024, 3), 3, 16, 3);
}

// scale one residual dim in the norm weights of selected layers so its
// activations dwarf the others at the q/k/v and gate/up probe sites
ModelCheckpoint planted_outlier_model(size_t dim, const std::vector<size_t>& layers,
                                      double boost, uint64_t seed) {
    ModelCheckpoint m = init_model(scfg(), seed);
    for (size_t l : layers) {
        m.tensors.at(layer_tensor_name(l, "attn_norm")).at(0, dim) = boost;
        m.tensors.at(layer_tensor_name(l, "ffn_norm")).at(0, dim) = boost;
    }
    return m;
}

}  // namespace

TEST_CASE("a planted high-magnitude dim is flagged top-1") {
    const ModelCheckpoint m = planted_outlier_model(5, {0, 1, 2}, 100.0, 21);
    const OutlierReport rep =
        detect_outliers(make_view(m), probe_seqs(), 6.0, OutlierMode::absolute);
    REQUIRE(!rep.ranked.empty());
    CHECK(rep.ranked[0].dim == 5);
    CHECK(rep.ranked[0].layers_affected == 3);
    CHECK(rep.ranked[0].global_max_abs >= 6.0);
}

TEST_CASE("bounded activations produce an empty report") {
    // untrained weights are ~N(0, 0.02): activations stay far below 6.0
    const ModelCheckpoint m = init_model(scfg(), 22);
    const OutlierReport rep =
        detect_outliers(make_view(m), probe_seqs(), 6.0, OutlierMode::absolute);
    CHECK(rep.ranked.empty());
    CHECK_THROWS_AS(detect_outliers(make_view(m), {}, 6.0, OutlierMode::absolute),
                    validation_error);
}

TEST_CASE("layers-affected ranking, verified by brute-force recording") {
    // dim 3 boosted in 3 layers, dim 9 in 2: ranking must be [3, 9]
    ModelCheckpoint m = planted_outlier_model(3, {0, 1, 2}, 50.0, 23);
    for (size_t l : {0ull, 2ull}) {
        m.tensors.at(layer_tensor_name(l, "attn_norm")).at(0, 9) = 50.0;
        m.tensors.at(layer_tensor_name(l, "ffn_norm")).at(0, 9) = 50.0;
    }
    const auto probe = probe_seqs();
    const OutlierReport rep =
        detect_outliers(make_view(m), probe, 6.0, OutlierMode::absolute);
    REQUIRE(rep.ranked.size() >= 2);
    CHECK(rep.ranked[0].dim == 3);
    CHECK(rep.ranked[0].layers_affected == 3);
    CHECK(rep.ranked[1].dim == 9);
    CHECK(rep.ranked[1].layers_affected == 2);

    // brute-force oracle: recompute per-layer flags from raw recorded activations
    struct Recorder final : CaptureSink {
        std::map<size_t, std::vector<Matrix>> per_layer;
        void record(size_t l, ProbeSite, const Matrix& x) override {
            per_layer[l].push_back(x);
        }
    } rec;
    const ModelView view = make_view(m);
    for (const auto& seq : probe) forward(view, seq, nullptr, &rec);
    for (const auto& r : rep.ranked) {
        size_t layers = 0;
        for (const auto& [l, mats] : rec.per_layer) {
            bool hit = false;
            for (const Matrix& x : mats)
                for (size_t t = 0; t < x.rows; ++t)
                    if (r.dim < x.cols) hit |= std::fabs(x.at(t, r.dim)) >= 6.0;
            layers += hit ? 1 : 0;
        }
        CHECK(layers == r.layers_affected);
    }
}

TEST_CASE("raising tau never adds a flagged dim") {
    const ModelCheckpoint m = planted_outlier_model(4, {0, 1}, 30.0, 24);
    const auto probe = probe_seqs();
    const ModelView view = make_view(m);
    for (OutlierMode mode : {OutlierMode::absolute, OutlierMode::relative}) {
        const OutlierReport lo = detect_outliers(view, probe, 3.0, mode);
        const OutlierReport hi = detect_outliers(view, probe, 9.0, mode);
        CHECK(hi.ranked.size() <= lo.ranked.size());
        for (const auto& r : hi.ranked) {
            bool present = false;
            for (const auto& s : lo.ranked) present |= (s.dim == r.dim);
            CHECK(present);
        }
    }
}

TEST_CASE("relative mode flags against the per-site median") {
    const ModelCheckpoint m = planted_outlier_model(7, {0, 1, 2}, 40.0, 25);
    const OutlierReport rep =
        detect_outliers(make_view(m), probe_seqs(), 6.0, OutlierMode::relative);
    REQUIRE(!rep.ranked.empty());
    CHECK(rep.ranked[0].dim == 7);
}

TEST_CASE("mixed_matmul_int8 with all dims preserved is the exact product") {
    const Matrix x = seeded_normal(5, 8, 0.0, 1.0, 31);
    const Matrix w = seeded_normal(8, 6, 0.0, 1.0, 32);
    std::set<size_t> all;
    for (size_t i = 0; i < 8; ++i) all.insert(i);
    const Matrix got = mixed_matmul_int8(x, w, all);
    const Matrix want = matmul(x, w);
    for (size_t i = 0; i < got.size(); ++i) CHECK(got.data[i] == want.data[i]);
}

TEST_CASE("mixed_matmul_int8 is exact on int8-gridded integer data") {
    // rows/cols contain +-127 so the absmax scale is exactly 1
    Matrix x(2, 4);
    x.data = {127, 3, -2, 1, -127, 5, 0, 2};
    Matrix w(4, 3);
    w.data = {127, -127, 1, 2, 3, 127, -1, 0, 2, 5, 1, -3};
    const Matrix got = mixed_matmul_int8(x, w, {});
    const Matrix want = matmul(x, w);
    for (size_t i = 0; i < got.size(); ++i) CHECK(got.data[i] == want.data[i]);
}

TEST_CASE("preserving a huge dim strictly lowers the int8 error") {
    CounterRng rng(33);
    Matrix x(6, 8);
    for (size_t i = 0; i < x.size(); ++i) x.data[i] = rng.normal(i);
    for (size_t t = 0; t < 6; ++t) x.at(t, 2) = 80.0 + rng.normal(100 + t);  // outlier dim 2
    const Matrix w = seeded_normal(8, 5, 0.0, 1.0, 34);
    const Matrix exact = matmul(x, w);

    auto frob_err = [&](const Matrix& m) {
        double s = 0.0;
        for (size_t i = 0; i < m.size(); ++i)
            s += (m.data[i] - exact.data[i]) * (m.data[i] - exact.data[i]);
        return std::sqrt(s);
    };
    const double with_outlier = frob_err(mixed_matmul_int8(x, w, {2}));
    const double without = frob_err(mixed_matmul_int8(x, w, {}));
    CHECK(with_outlier < without);
}

TEST_CASE("int8 error never increases as the preserved set grows along the ranking") {
    CounterRng rng(35);
    Matrix x(6, 10);
    for (size_t i = 0; i < x.size(); ++i) x.data[i] = rng.normal(i);
    // planted outliers of decreasing magnitude
    for (size_t t = 0; t < 6; ++t) {
        x.at(t, 1) = 90.0 + rng.normal(200 + t);
        x.at(t, 4) = 40.0 + rng.normal(300 + t);
        x.at(t, 7) = 20.0 + rng.normal(400 + t);
    }
    const Matrix w = seeded_normal(10, 4, 0.0, 1.0, 36);
    const Matrix exact = matmul(x, w);
    auto frob_err = [&](const std::set<size_t>& o) {
        const Matrix m = mixed_matmul_int8(x, w, o);
        double s = 0.0;
        for (size_t i = 0; i < m.size(); ++i)
            s += (m.data[i] - exact.data[i]) * (m.data[i] - exact.data[i]);
        return std::sqrt(s);
    };
    const double e0 = frob_err({});
    const double e1 = frob_err({1});
    const double e2 = frob_err({1, 4});
    const double e3 = frob_err({1, 4, 7});
    CHECK(e1 <= e0);
    CHECK(e2 <= e1);
    CHECK(e3 <= e2);
}

TEST_CASE("mixed_matmul_int8 handles zero rows and columns") {
    Matrix x(2, 3);  // row 1 all zero
    x.data = {1, 2, 3, 0, 0, 0};
    Matrix w(3, 2);  // col 1 all zero
    w.data = {1, 0, 2, 0, 3, 0};
    const Matrix got = mixed_matmul_int8(x, w, {});
    CHECK(got.at(1, 0) == 0.0);
    CHECK(got.at(0, 1) == 0.0);
    CHECK(got.at(0, 0) == doctest::Approx(14.0).epsilon(0.02));
    CHECK_THROWS_AS(mixed_matmul_int8(x, w, {3}), validation_error);
    CHECK_THROWS_AS(mixed_matmul_int8(x, Matrix(4, 2), {}), validation_error);
}

TEST_CASE("rank_crucial sorts by mean error with fixed tie order") {
    ErrorReport rep;
    auto add = [&](const std::string& name, ProjectionType t, double e) {
        TensorErrorRow row;
        row.type = t;
        row.bits = 2;
        row.group_size = 32;
        row.rel_recon_error = e;
        rep.rows.emplace(name, row);
    };
    add("l0.q", ProjectionType::q, 0.3);
    add("l0.k", ProjectionType::k, 0.25);
    add("l0.v", ProjectionType::v, 0.1);
    add("l0.o", ProjectionType::o, 0.1);
    add("l0.gate", ProjectionType::gate, 0.05);
    add("l0.up", ProjectionType::up, 0.05);
    add("l0.down", ProjectionType::down, 0.4);
    rep.finalize();

    const CrucialRanking r = rank_crucial(rep, 2);
    REQUIRE(r.top.size() == 2);
    CHECK(r.top[0] == ProjectionType::down);
    CHECK(r.top[1] == ProjectionType::q);

    // all-equal errors: fixed order q,k,v
    ErrorReport eq;
    for (ProjectionType t : kProjectionOrder)
        eq.rows.emplace(std::string("x.") + to_string(t),
                        TensorErrorRow{t, 2, 32, 0.5});
    eq.finalize();
    const CrucialRanking re = rank_crucial(eq, 3);
    CHECK(re.top[0] == ProjectionType::q);
    CHECK(re.top[1] == ProjectionType::k);
    CHECK(re.top[2] == ProjectionType::v);

    // missing type rejected
    ErrorReport missing = rep;
    missing.rows.erase("l0.down");
    CHECK_THROWS_AS(rank_crucial(missing, 2), validation_error);
    CHECK_THROWS_AS(rank_crucial(rep, 8), validation_error);
}

TEST_CASE("rank_crucial matches a brute-force sort and ignores rescaling") {
    CounterRng rng(77);
    ErrorReport rep;
    std::map<ProjectionType, double> means;
    size_t i = 0;
    for (ProjectionType t : kProjectionOrder) {
        const double e0 = rng.uniform(i++);
        const double e1 = rng.uniform(i++);
        rep.rows.emplace(std::string("l0.") + to_string(t), TensorErrorRow{t, 2, 32, e0});
        rep.rows.emplace(std::string("l1.") + to_string(t), TensorErrorRow{t, 2, 32, e1});
        means[t] = (e0 + e1) / 2.0;
    }
    rep.finalize();
    const CrucialRanking r = rank_crucial(rep, 7);
    for (size_t k = 1; k < r.ordered.size(); ++k)
        CHECK(means[r.ordered[k - 1]] >= means[r.ordered[k]]);

    ErrorReport scaled = rep;
    for (auto& [name, row] : scaled.rows) row.rel_recon_error *= 3.7;
    scaled.finalize();
    const CrucialRanking rs = rank_crucial(scaled, 7);
    CHECK(rs.ordered == r.ordered);
}

TEST_CASE("sensitivity suite: f32 row equals direct evaluation exactly") {
    const ModelCheckpoint m = init_model(scfg(), 26);
    const std::string corpus = make_synthetic_corpus(1024, 9);
    const auto calib = sample_calibration(corpus, 3, 16, 9);
    TaskSpec ppl;
    ppl.kind = TaskSpec::Kind::lm_ppl;
    ppl.seq_len = 16;
    ppl.stride = 8;
    const SensitivityTable table =
        run_sensitivity_suite(m, 2, calib, corpus, {ppl}, QuantAlgo::gptq, 11);
    REQUIRE(table.rows.size() == 5);  // f32, all, !att, !ffn, !crucial
    CHECK(table.rows[0].plan == "f32");
    const double direct = perplexity(make_view(m), corpus, 16, 8);
    CHECK(table.rows[0].metric_value == direct);
    // total-bits accounting: preserving components costs more bits
    CHECK(table.rows[1].plan == "all");
    CHECK(table.rows[1].total_bits < table.rows[3].total_bits);  // all < !ffn
    CHECK(table.rows[3].total_bits < table.rows[0].total_bits);  // !ffn < f32
    // the crucial plan preserves down + 2 attention types: fewer bits than !ffn
    // is not guaranteed in general, but fewer than f32 always
    CHECK(table.rows[4].total_bits < table.rows[0].total_bits);
    const std::string csv = sensitivity_csv(table);
    CHECK(csv.find("plan,bits,metric_name,metric_value,total_bits,memory_bytes") == 0);
    CHECK(csv.find("f32,32,lm_ppl_perplexity") != std::string::npos);
}

TEST_CASE("crucial plan preserves down plus two attention types") {
    const ModelCheckpoint m = init_model(scfg(), 27);
    const auto calib = probe_seqs();
    const auto [qm, rep] = quantize_model(m, parse_plan("all", 2, 8), calib, QuantAlgo::gptq);
    const QuantPlan plan = make_crucial_plan(rep, 2, 8);
    CHECK(plan.preserve_types.count(ProjectionType::down) == 1);
    size_t att = 0;
    for (ProjectionType t : plan.preserve_types) att += is_attention_type(t) ? 1 : 0;
    CHECK(att == 2);
    CHECK(plan.preserve_types.size() == 3);
}
