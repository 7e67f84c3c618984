#include "quantlab/lora.hpp"

#include <cmath>

#include "quantlab/rng.hpp"

namespace quantlab {

const ModelConfig& AdapterSet::config() const {
    if (mode == AdapterMode::pre_quant) {
        if (!base_ckpt) throw validation_error("adapter set has no base checkpoint");
        return base_ckpt->config;
    }
    if (!base_q) throw validation_error("adapter set has no quantized base");
    return base_q->config;
}

size_t AdapterSet::trainable_params() const {
    size_t n = 0;
    for (const auto& [name, ad] : adapters) n += ad.a.size() + ad.b.size();
    return n;
}

static std::map<std::string, LoraAdapter> build_adapters(
    const ModelConfig& cfg, const std::set<ProjectionType>& targets, size_t rank,
    double alpha, uint64_t seed) {
    if (targets.empty()) throw validation_error("attach: empty target set");
    if (rank < 1) throw validation_error("attach: rank must be >= 1");
    for (ProjectionType t : targets)
        if (!is_attention_type(t) && !is_ffn_type(t))
            throw validation_error(std::string("attach: '") + to_string(t) +
                                   "' is not an adapter target (projections only)");
    std::map<std::string, LoraAdapter> adapters;
    for (const auto& name : tensor_names(cfg)) {
        const auto type = projection_of(name);
        if (!type || !targets.count(*type)) continue;
        const auto [d_out, d_in] = tensor_shape(cfg, name);
        LoraAdapter ad;
        ad.target = name;
        ad.rank = rank;
        ad.alpha = alpha;
        ad.a = seeded_normal(rank, d_in, 0.0, 0.02, sub_seed(seed, "lora." + name));
        ad.b = Matrix(d_out, rank);
        adapters.emplace(name, std::move(ad));
    }
    return adapters;
}

AdapterSet attach(const ModelCheckpoint& base, const std::set<ProjectionType>& targets,
                  size_t rank, double alpha, uint64_t seed) {
    validate_checkpoint(base);
    AdapterSet aset;
    aset.mode = AdapterMode::pre_quant;
    aset.base_ckpt = &base;
    aset.adapters = build_adapters(base.config, targets, rank, alpha, seed);
    return aset;
}

AdapterSet attach(const QuantizedModel& base, const std::set<ProjectionType>& targets,
                  size_t rank, double alpha, uint64_t seed) {
    validate_quantized_model(base);
    AdapterSet aset;
    aset.mode = AdapterMode::post_quant;
    aset.base_q = &base;
    aset.adapters = build_adapters(base.config, targets, rank, alpha, seed);
    return aset;
}

ModelView make_view(const AdapterSet& aset) {
    ModelView view = aset.mode == AdapterMode::pre_quant ? make_view(*aset.base_ckpt)
                                                         : make_view(*aset.base_q);
    for (const auto& [name, ad] : aset.adapters) {
        LoraRef ref;
        ref.a = &ad.a;
        ref.b = &ad.b;
        ref.scaling = ad.scaling();
        attach_lora(view, name, ref);
    }
    return view;
}

Matrix adapted_forward(const AdapterSet& aset, const TokenSeq& tokens) {
    return forward(make_view(aset), tokens);
}

AdapterTrainResult train_adapters(AdapterSet& aset, SampleStream& stream,
                                  const TrainHyper& hyper) {
    hyper.validate();
    // freeze the whole base: only adapter factors carry gradients
    std::set<std::string> frozen = hyper.frozen;
    for (const auto& name : tensor_names(aset.config())) frozen.insert(name);

    AdamState adam;
    std::map<std::string, Matrix*> params;
    for (auto& [name, ad] : aset.adapters) {
        params.emplace(adapter_grad_key(name, 'A'), &ad.a);
        params.emplace(adapter_grad_key(name, 'B'), &ad.b);
    }

    AdapterTrainResult result;
    result.loss_curve.reserve(hyper.steps);
    result.trainable_params = aset.trainable_params();
    TrainHyper h = hyper;
    h.frozen = frozen;
    for (size_t step = 0; step < hyper.steps; ++step) {
        const ModelView view = make_view(aset);
        const auto batch = stream.next_batch(step, hyper.batch);
        LossResult lr;
        try {
            lr = loss_and_grads(view, batch, h.frozen);
        } catch (const numerical_error&) {
            throw numerical_error("adapter training diverged: non-finite loss at step " +
                                  std::to_string(step));
        }
        result.loss_curve.push_back(lr.loss);
        adam.step(params, lr.grads, h);
    }
    result.optimizer_state_bytes = adam.state_bytes();
    return result;
}

ModelCheckpoint merge_adapters(const AdapterSet& aset) {
    if (aset.mode != AdapterMode::pre_quant)
        throw validation_error(
            "merge_adapters: unsupported for a quantized base: refit required");
    ModelCheckpoint merged = *aset.base_ckpt;
    for (const auto& [name, ad] : aset.adapters) {
        Matrix& w = merged.tensors.at(name);
        const Matrix delta = matmul(ad.b, ad.a);  // d_out x d_in
        const double s = ad.scaling();
        for (size_t i = 0; i < w.size(); ++i) w.data[i] += s * delta.data[i];
    }
    return merged;
}

}  // namespace quantlab
