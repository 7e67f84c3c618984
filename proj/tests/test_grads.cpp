#include <doctest.h>

#include <cmath>

#include "quantlab/backward.hpp"
#include "quantlab/lora.hpp"
#include "quantlab/rng.hpp"

using namespace quantlab;

namespace {

ModelConfig fd_config() {
    ModelConfig cfg;
    cfg.vocab_size = 13;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    cfg.max_seq = 16;
    return cfg;
}

std::vector<TokenSeq> fd_batch() { return {{1, 5, 2, 9, 3}, {4, 4, 7}}; }

// central finite difference of the batch loss wrt one coordinate
double fd_loss_delta(ModelCheckpoint& m, const std::string& name, size_t idx, double h,
                     const std::vector<TokenSeq>& batch) {
    Matrix& t = m.tensors.at(name);
    const double orig = t.data[idx];
    t.data[idx] = orig + h;
    const double up = batch_loss(make_view(m), batch);
    t.data[idx] = orig - h;
    const double down = batch_loss(make_view(m), batch);
    t.data[idx] = orig;
    return (up - down) / (2.0 * h);
}

double rel_err(double got, double want) {
    return std::fabs(got - want) / std::max({std::fabs(got), std::fabs(want), 1e-8});
}

}  // namespace

TEST_CASE("frozen everything yields loss but no gradients") {
    const ModelCheckpoint m = init_model(fd_config(), 3);
    std::set<std::string> frozen;
    for (const auto& [name, t] : m.tensors) frozen.insert(name);
    const LossResult r = loss_and_grads(make_view(m), fd_batch(), frozen);
    CHECK(r.grads.empty());
    CHECK(std::isfinite(r.loss));
    CHECK(r.loss > 0.0);
}

TEST_CASE("uniform logits give ln(vocab) loss") {
    ModelConfig cfg;
    cfg.vocab_size = 259;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    cfg.max_seq = 8;
    ModelCheckpoint m = init_model(cfg, 4);
    for (auto& [name, t] : m.tensors) {
        if (is_norm_tensor(name) || name == "embed") continue;
        for (double& x : t.data) x = 0.0;
    }
    const LossResult r = loss_and_grads(make_view(m), {{1, 2, 3, 4}});
    CHECK(r.loss == doctest::Approx(std::log(259.0)).epsilon(1e-12));
}

TEST_CASE("empty batch is rejected") {
    const ModelCheckpoint m = init_model(fd_config(), 3);
    CHECK_THROWS_AS(loss_and_grads(make_view(m), {}), validation_error);
}

TEST_CASE("analytic gradients match central finite differences on every tensor") {
    ModelCheckpoint m = init_model(fd_config(), 17);
    const auto batch = fd_batch();
    const LossResult r = loss_and_grads(make_view(m), batch);
    const double h = 1e-4;

    for (const auto& [name, grad] : r.grads) {
        CounterRng rng(fnv1a64(name) ^ 99);
        size_t checked = 0;
        for (size_t trial = 0; trial < 40 && checked < 20; ++trial) {
            const size_t idx = rng.below(trial, grad.size());
            const double want = fd_loss_delta(m, name, idx, h, batch);
            const double got = grad.data[idx];
            if (std::fabs(want) < 1e-7 && std::fabs(got) < 1e-7) continue;  // both ~zero
            INFO(name, "[", idx, "] analytic=", got, " fd=", want);
            CHECK(rel_err(got, want) <= 1e-5);
            ++checked;
        }
        CHECK(checked > 0);
    }
    // every tensor kind is covered: embed, head, both layer norms, the final
    // norm, q, k, v, o, gate, up, down
    CHECK(r.grads.size() == m.tensors.size());
}

TEST_CASE("tied embeddings accumulate head gradients into embed") {
    ModelConfig cfg = fd_config();
    cfg.tie_embeddings = true;
    ModelCheckpoint m = init_model(cfg, 23);
    const auto batch = fd_batch();
    const LossResult r = loss_and_grads(make_view(m), batch);
    CHECK(r.grads.find("head") == r.grads.end());
    const Matrix& ge = r.grads.at("embed");
    CounterRng rng(7);
    const double h = 1e-4;
    size_t checked = 0;
    for (size_t trial = 0; trial < 30 && checked < 10; ++trial) {
        const size_t idx = rng.below(trial, ge.size());
        const double want = fd_loss_delta(m, "embed", idx, h, batch);
        if (std::fabs(want) < 1e-7 && std::fabs(ge.data[idx]) < 1e-7) continue;
        CHECK(rel_err(ge.data[idx], want) <= 1e-5);
        ++checked;
    }
    CHECK(checked > 0);
}

TEST_CASE("adapter factor gradients match finite differences") {
    const ModelCheckpoint base = init_model(fd_config(), 31);
    AdapterSet aset = attach(
        base, {ProjectionType::q, ProjectionType::v, ProjectionType::down}, 4, 16.0, 51);
    // make B nonzero so its gradient path is exercised end to end
    for (auto& [name, ad] : aset.adapters)
        ad.b = seeded_normal(ad.b.rows, ad.b.cols, 0.0, 0.05, fnv1a64(name));
    const auto batch = fd_batch();
    std::set<std::string> frozen;
    for (const auto& [name, t] : base.tensors) frozen.insert(name);
    const LossResult r = loss_and_grads(make_view(aset), batch, frozen);

    CHECK(r.grads.size() == 2 * aset.adapters.size());
    const double h = 1e-4;
    for (auto& [target, ad] : aset.adapters) {
        for (char factor : {'A', 'B'}) {
            Matrix& param = factor == 'A' ? ad.a : ad.b;
            const Matrix& grad = r.grads.at(adapter_grad_key(target, factor));
            CounterRng rng(fnv1a64(target) ^ static_cast<uint64_t>(factor));
            size_t checked = 0;
            for (size_t trial = 0; trial < 40 && checked < 10; ++trial) {
                const size_t idx = rng.below(trial, param.size());
                const double orig = param.data[idx];
                param.data[idx] = orig + h;
                const double up = batch_loss(make_view(aset), batch);
                param.data[idx] = orig - h;
                const double down = batch_loss(make_view(aset), batch);
                param.data[idx] = orig;
                const double want = (up - down) / (2.0 * h);
                if (std::fabs(want) < 1e-7 && std::fabs(grad.data[idx]) < 1e-7) continue;
                INFO(target, ".", factor, "[", idx, "]");
                CHECK(rel_err(grad.data[idx], want) <= 1e-5);
                ++checked;
            }
            CHECK(checked > 0);
        }
    }
}
