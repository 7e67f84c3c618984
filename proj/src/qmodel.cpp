#include "quantlab/qmodel.hpp"

#include <algorithm>
#include <cmath>

#include "quantlab/rng.hpp"

namespace quantlab {

int QuantPlan::bits_for(ProjectionType t) const {
    auto it = bits_override.find(t);
    return it == bits_override.end() ? default_bits : it->second;
}

bool QuantPlan::preserves(const std::string& name, ProjectionType t) const {
    if (preserve_names.count(name)) return true;
    if (t == ProjectionType::embed || t == ProjectionType::head)
        return quantize_extras.count(t) == 0;
    return preserve_types.count(t) != 0;
}

QuantPlan parse_plan(const std::string& plan, int bits, size_t group_size) {
    QuantPlan p;
    p.default_bits = bits;
    p.group_size = group_size;
    if (plan == "all") return p;
    if (plan == "!att") {
        p.preserve_types = {ProjectionType::q, ProjectionType::k, ProjectionType::v,
                            ProjectionType::o};
        return p;
    }
    if (plan == "!ffn") {
        p.preserve_types = {ProjectionType::gate, ProjectionType::up, ProjectionType::down};
        return p;
    }
    throw validation_error("unknown plan '" + plan +
                           "' (valid: all, !att, !ffn, !crucial)");
}

QuantAlgo algo_from_string(const std::string& s) {
    if (s == "rtn") return QuantAlgo::rtn;
    if (s == "gptq") return QuantAlgo::gptq;
    throw validation_error("unknown quantization algorithm '" + s + "' (valid: rtn, gptq)");
}

const char* to_string(QuantAlgo a) { return a == QuantAlgo::rtn ? "rtn" : "gptq"; }

void ErrorReport::finalize() {
    std::map<ProjectionType, std::pair<double, size_t>> acc;
    for (const auto& [name, row] : rows) {
        auto& a = acc[row.type];
        a.first += row.rel_recon_error;
        a.second += 1;
    }
    per_type_mean.clear();
    for (const auto& [t, a] : acc) per_type_mean[t] = a.first / static_cast<double>(a.second);
}

namespace {

// Accumulates X^T X blocks per probe site without storing all tokens:
// keeps the running Gram matrix (input-dim x input-dim) and, for the
// report denominators, the raw activations.
struct SiteCapture final : CaptureSink {
    size_t layer = SIZE_MAX;
    std::map<ProbeSite, Matrix> activations;  // tokens x width, stacked

    void record(size_t l, ProbeSite site, const Matrix& x) override {
        if (l != layer) return;
        Matrix& acc = activations[site];
        if (acc.rows == 0) {
            acc = x;
        } else {
            const size_t old_rows = acc.rows;
            Matrix grown(old_rows + x.rows, x.cols);
            std::copy(acc.data.begin(), acc.data.end(), grown.data.begin());
            std::copy(x.data.begin(), x.data.end(), grown.data.begin() + old_rows * x.cols);
            acc = std::move(grown);
        }
    }
};

ModelView view_over_entries(const ModelConfig& cfg,
                            const std::map<std::string, QTensorEntry>& entries) {
    // Builds the forward view over dequantized/effective matrices.
    ModelView v;
    v.config = cfg;
    auto slot = [&](const std::string& name) {
        LinearSlot s;
        s.name = name;
        const Matrix& w = entries.at(name).effective();
        s.w = &w;
        s.wt = transpose(w);
        return s;
    };
    v.embed = &entries.at("embed").effective();
    v.final_norm = &entries.at("final_norm").effective();
    v.layers.resize(cfg.n_layers);
    for (size_t l = 0; l < cfg.n_layers; ++l) {
        LayerSlots& ls = v.layers[l];
        ls.attn_norm = &entries.at(layer_tensor_name(l, "attn_norm")).effective();
        ls.ffn_norm = &entries.at(layer_tensor_name(l, "ffn_norm")).effective();
        ls.q = slot(layer_tensor_name(l, "attn.q"));
        ls.k = slot(layer_tensor_name(l, "attn.k"));
        ls.v = slot(layer_tensor_name(l, "attn.v"));
        ls.o = slot(layer_tensor_name(l, "attn.o"));
        ls.gate = slot(layer_tensor_name(l, "ffn.gate"));
        ls.up = slot(layer_tensor_name(l, "ffn.up"));
        ls.down = slot(layer_tensor_name(l, "ffn.down"));
    }
    v.head = cfg.tie_embeddings ? slot("embed") : slot("head");
    return v;
}

QTensorEntry f32_entry(const Matrix& w) {
    QTensorEntry e;
    e.kind = QTensorEntry::Kind::f32;
    e.f32 = w;
    e.dequant = w;
    return e;
}

QTensorEntry quantized_entry(QuantizedTensor qt) {
    QTensorEntry e;
    e.kind = QTensorEntry::Kind::quantized;
    e.dequant = dequantize(qt);
    e.qt = std::move(qt);
    return e;
}

}  // namespace

std::pair<QuantizedModel, ErrorReport> quantize_model(const ModelCheckpoint& model,
                                                      const QuantPlan& plan,
                                                      const std::vector<TokenSeq>& calib,
                                                      QuantAlgo algo, double damp_frac) {
    validate_checkpoint(model);
    QuantParams base_params{plan.default_bits, plan.group_size};
    base_params.validate();
    for (const auto& name : plan.preserve_names)
        if (model.tensors.find(name) == model.tensors.end())
            throw validation_error("plan preserves unknown tensor '" + name + "'");
    for (const auto& [t, b] : plan.bits_override) QuantParams{b, plan.group_size}.validate();
    if (algo == QuantAlgo::gptq && calib.empty())
        throw validation_error("gptq requires a nonempty calibration set");
    for (const auto& seq : calib) validate_tokens(model.config, seq);

    const ModelConfig& cfg = model.config;
    QuantizedModel qm;
    qm.config = cfg;
    for (const auto& [name, w] : model.tensors) qm.entries.emplace(name, f32_entry(w));
    ErrorReport report;

    auto quantize_one = [&](const std::string& name, ProjectionType type, const Matrix& x_t) {
        // x_t: captured activations, tokens x d_in (may be empty for rtn)
        const Matrix& w = model.tensors.at(name);
        QuantParams p{plan.bits_for(type), plan.group_size};
        Matrix h;
        if (x_t.rows > 0) {
            h = build_hessian(transpose(x_t), damp_frac);
        } else {
            h = Matrix::identity(w.cols);
        }
        QuantizedTensor qt;
        double err;
        if (algo == QuantAlgo::gptq) {
            GptqResult r = quantize_gptq(w, h, p);
            qt = std::move(r.tensor);
            err = r.recon_error;
        } else {
            qt = quantize_rtn(w, p);
            err = reconstruction_error(w, dequantize(qt), h);
        }
        TensorErrorRow row;
        row.type = type;
        row.bits = p.bits;
        row.group_size = p.group_size;
        const Matrix wh = matmul(w, h);
        double ref = 0.0;
        for (size_t i = 0; i < w.size(); ++i) ref += wh.data[i] * w.data[i];
        ref *= 0.5;
        row.rel_recon_error = ref > 0.0 ? err / ref : 0.0;
        report.rows.emplace(name, row);
        qm.entries.at(name) = quantized_entry(std::move(qt));
    };

    static const std::pair<const char*, ProjectionType> kLayerProjections[] = {
        {"attn.q", ProjectionType::q},     {"attn.k", ProjectionType::k},
        {"attn.v", ProjectionType::v},     {"attn.o", ProjectionType::o},
        {"ffn.gate", ProjectionType::gate}, {"ffn.up", ProjectionType::up},
        {"ffn.down", ProjectionType::down},
    };

    for (size_t l = 0; l < cfg.n_layers; ++l) {
        bool any = false;
        for (const auto& [suffix, type] : kLayerProjections)
            any |= !plan.preserves(layer_tensor_name(l, suffix), type);
        SiteCapture cap;
        if (any && !calib.empty()) {
            cap.layer = l;
            const ModelView v = view_over_entries(cfg, qm.entries);
            for (const auto& seq : calib) forward(v, seq, nullptr, &cap, l);
        }
        auto site_for = [](ProjectionType t) {
            switch (t) {
                case ProjectionType::o: return ProbeSite::o_in;
                case ProjectionType::gate:
                case ProjectionType::up: return ProbeSite::ffn_in;
                case ProjectionType::down: return ProbeSite::down_in;
                default: return ProbeSite::attn_in;
            }
        };
        for (const auto& [suffix, type] : kLayerProjections) {
            const std::string name = layer_tensor_name(l, suffix);
            if (plan.preserves(name, type)) continue;
            auto it = cap.activations.find(site_for(type));
            quantize_one(name, type, it == cap.activations.end() ? Matrix() : it->second);
        }
    }

    if (plan.quantize_extras.count(ProjectionType::head) && !cfg.tie_embeddings) {
        Matrix x_t;  // final-norm outputs under the fully quantized stack
        if (!calib.empty()) {
            const ModelView v = view_over_entries(cfg, qm.entries);
            for (const auto& seq : calib) {
                ForwardTrace trace;
                forward(v, seq, &trace);
                const Matrix& add = trace.final_normed;
                Matrix grown(x_t.rows + add.rows, add.cols);
                std::copy(x_t.data.begin(), x_t.data.end(), grown.data.begin());
                std::copy(add.data.begin(), add.data.end(),
                          grown.data.begin() + x_t.rows * add.cols);
                x_t = std::move(grown);
            }
        }
        quantize_one("head", ProjectionType::head, x_t);
    }
    if (plan.quantize_extras.count(ProjectionType::embed)) {
        // lookup table: inputs are one-hot, so feedback has nothing to do;
        // grid fit + rounding along d_model per row (identity Hessian)
        quantize_one("embed", ProjectionType::embed, Matrix());
    }

    report.finalize();
    return {std::move(qm), std::move(report)};
}

ModelView make_view(const QuantizedModel& qm) {
    validate_quantized_model(qm);
    return view_over_entries(qm.config, qm.entries);
}

Matrix forward(const QuantizedModel& qm, const TokenSeq& tokens) {
    return forward(make_view(qm), tokens);
}

ModelCheckpoint to_checkpoint(const QuantizedModel& qm) {
    ModelCheckpoint m;
    m.config = qm.config;
    m.format_version = qm.format_version;
    for (const auto& [name, e] : qm.entries) m.tensors.emplace(name, e.dequant);
    return m;
}

QuantizedModel from_checkpoint(const ModelCheckpoint& model) {
    validate_checkpoint(model);
    QuantizedModel qm;
    qm.config = model.config;
    qm.format_version = model.format_version;
    for (const auto& [name, w] : model.tensors) qm.entries.emplace(name, f32_entry(w));
    return qm;
}

void validate_quantized_model(const QuantizedModel& qm) {
    qm.config.validate();
    for (const auto& name : tensor_names(qm.config)) {
        auto it = qm.entries.find(name);
        if (it == qm.entries.end())
            throw validation_error("quantized model: missing tensor '" + name + "'");
        const auto [r, c] = tensor_shape(qm.config, name);
        const QTensorEntry& e = it->second;
        if (e.dequant.rows != r || e.dequant.cols != c)
            throw validation_error("quantized model: tensor '" + name + "' has wrong shape");
        if (e.kind == QTensorEntry::Kind::quantized) validate_quantized(e.qt);
    }
}

std::vector<TokenSeq> sample_calibration(const std::string& corpus, size_t n_sequences,
                                         size_t seq_len, uint64_t seed) {
    if (corpus.size() < seq_len + 1)
        throw validation_error("calibration corpus shorter than seq_len+1 bytes");
    CounterRng rng(sub_seed(seed, "calibration"));
    std::vector<TokenSeq> out;
    out.reserve(n_sequences);
    const size_t span = corpus.size() - seq_len;
    for (size_t i = 0; i < n_sequences; ++i) {
        const size_t off = rng.below(i, span);
        TokenSeq seq;
        seq.reserve(seq_len + 1);
        for (size_t j = 0; j <= seq_len; ++j)
            seq.push_back(static_cast<Token>(static_cast<unsigned char>(corpus[off + j])));
        out.push_back(std::move(seq));
    }
    return out;
}

}  // namespace quantlab
