#include "quantlab/forward.hpp"

#include <cmath>

namespace quantlab {

void validate_tokens(const ModelConfig& cfg, const TokenSeq& tokens) {
    if (tokens.empty()) throw validation_error("token sequence is empty");
    if (tokens.size() > cfg.max_seq)
        throw validation_error("token sequence length " + std::to_string(tokens.size()) +
                               " exceeds max_seq " + std::to_string(cfg.max_seq));
    for (Token t : tokens)
        if (t < 0 || static_cast<size_t>(t) >= cfg.vocab_size)
            throw validation_error("token id " + std::to_string(t) + " out of range");
}

static LinearSlot make_slot(const std::string& name, const Matrix& w) {
    LinearSlot s;
    s.name = name;
    s.w = &w;
    s.wt = transpose(w);
    return s;
}

ModelView make_view(const ModelCheckpoint& model) {
    validate_checkpoint(model);
    const ModelConfig& cfg = model.config;
    ModelView v;
    v.config = cfg;
    v.embed = &model.tensors.at("embed");
    v.final_norm = &model.tensors.at("final_norm");
    v.layers.resize(cfg.n_layers);
    for (size_t l = 0; l < cfg.n_layers; ++l) {
        LayerSlots& ls = v.layers[l];
        ls.attn_norm = &model.tensors.at(layer_tensor_name(l, "attn_norm"));
        ls.ffn_norm = &model.tensors.at(layer_tensor_name(l, "ffn_norm"));
        ls.q = make_slot(layer_tensor_name(l, "attn.q"), model.tensors.at(layer_tensor_name(l, "attn.q")));
        ls.k = make_slot(layer_tensor_name(l, "attn.k"), model.tensors.at(layer_tensor_name(l, "attn.k")));
        ls.v = make_slot(layer_tensor_name(l, "attn.v"), model.tensors.at(layer_tensor_name(l, "attn.v")));
        ls.o = make_slot(layer_tensor_name(l, "attn.o"), model.tensors.at(layer_tensor_name(l, "attn.o")));
        ls.gate = make_slot(layer_tensor_name(l, "ffn.gate"), model.tensors.at(layer_tensor_name(l, "ffn.gate")));
        ls.up = make_slot(layer_tensor_name(l, "ffn.up"), model.tensors.at(layer_tensor_name(l, "ffn.up")));
        ls.down = make_slot(layer_tensor_name(l, "ffn.down"), model.tensors.at(layer_tensor_name(l, "ffn.down")));
    }
    if (cfg.tie_embeddings) {
        v.head = make_slot("embed", model.tensors.at("embed"));
    } else {
        v.head = make_slot("head", model.tensors.at("head"));
    }
    return v;
}

void attach_lora(ModelView& view, const std::string& target, const LoraRef& ref) {
    auto try_slot = [&](LinearSlot& s) {
        if (s.name == target) {
            s.lora = ref;
            return true;
        }
        return false;
    };
    for (auto& ls : view.layers) {
        if (try_slot(ls.q) || try_slot(ls.k) || try_slot(ls.v) || try_slot(ls.o) ||
            try_slot(ls.gate) || try_slot(ls.up) || try_slot(ls.down))
            return;
    }
    if (try_slot(view.head)) return;
    throw validation_error("attach_lora: no projection named '" + target + "'");
}

void rope_rotate_inplace(double* v, size_t head_dim, size_t position, double base, int sign) {
    const size_t pairs = head_dim / 2;
    for (size_t i = 0; i < pairs; ++i) {
        const double theta =
            static_cast<double>(position) *
            std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        const double c = std::cos(theta);
        const double s = sign * std::sin(theta);
        const double x = v[2 * i];
        const double y = v[2 * i + 1];
        v[2 * i] = x * c - y * s;
        v[2 * i + 1] = x * s + y * c;
    }
}

std::vector<double> rope_rotate(const std::vector<double>& v, size_t position, double base) {
    if (v.size() % 2 != 0)
        throw validation_error("rope_rotate: head_dim must be even");
    std::vector<double> out = v;
    rope_rotate_inplace(out.data(), out.size(), position, base);
    return out;
}

void rmsnorm_forward(const Matrix& x, const Matrix& w, double eps, Matrix& y,
                     std::vector<double>& rms_inv) {
    const size_t d = x.cols;
    y = Matrix(x.rows, d);
    rms_inv.assign(x.rows, 0.0);
    for (size_t t = 0; t < x.rows; ++t) {
        const double* xr = x.row(t);
        double ss = 0.0;
        for (size_t i = 0; i < d; ++i) ss += xr[i] * xr[i];
        const double r = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
        rms_inv[t] = r;
        double* yr = y.row(t);
        for (size_t i = 0; i < d; ++i) yr[i] = w.data[i] * xr[i] * r;
    }
}

void rmsnorm_backward(const Matrix& x, const Matrix& w, const std::vector<double>& rms_inv,
                      const Matrix& dy, Matrix& dx_accum, Matrix* dw_accum) {
    const size_t d = x.cols;
    for (size_t t = 0; t < x.rows; ++t) {
        const double* xr = x.row(t);
        const double* dyr = dy.row(t);
        const double r = rms_inv[t];
        double dot = 0.0;
        for (size_t i = 0; i < d; ++i) dot += dyr[i] * w.data[i] * xr[i];
        const double r3_over_d = r * r * r * dot / static_cast<double>(d);
        double* dxr = dx_accum.row(t);
        for (size_t i = 0; i < d; ++i)
            dxr[i] += dyr[i] * w.data[i] * r - xr[i] * r3_over_d;
        if (dw_accum) {
            double* dwr = dw_accum->row(0);
            for (size_t i = 0; i < d; ++i) dwr[i] += dyr[i] * xr[i] * r;
        }
    }
}

// y = x W^T (+ adapter path).
static Matrix linear_forward(const LinearSlot& slot, const Matrix& x) {
    Matrix y = matmul(x, slot.wt);
    if (slot.lora.attached()) {
        const Matrix z = matmul_nt(x, *slot.lora.a);   // T x r
        const Matrix add = matmul_nt(z, *slot.lora.b); // T x d_out
        const double s = slot.lora.scaling;
        for (size_t i = 0; i < y.size(); ++i) y.data[i] += s * add.data[i];
    }
    return y;
}

Matrix forward(const ModelView& view, const TokenSeq& tokens, ForwardTrace* trace,
               CaptureSink* sink, size_t upto_layer) {
    const ModelConfig& cfg = view.config;
    validate_tokens(cfg, tokens);
    const size_t T = tokens.size();
    const size_t d = cfg.d_model;
    const size_t nh = cfg.n_heads;
    const size_t hd = cfg.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    if (trace) {
        trace->tokens = tokens;
        trace->layers.assign(cfg.n_layers, LayerTrace{});
    }

    Matrix x(T, d);
    for (size_t t = 0; t < T; ++t) {
        const double* e = view.embed->row(static_cast<size_t>(tokens[t]));
        double* xr = x.row(t);
        for (size_t i = 0; i < d; ++i) xr[i] = e[i];
    }

    const size_t last_layer = std::min(upto_layer, cfg.n_layers == 0 ? 0 : cfg.n_layers - 1);
    for (size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerSlots& ls = view.layers[l];
        LayerTrace* lt = trace ? &trace->layers[l] : nullptr;
        if (lt) lt->x_in = x;

        Matrix normed;
        std::vector<double> rms_inv;
        rmsnorm_forward(x, *ls.attn_norm, cfg.norm_eps, normed, rms_inv);
        if (sink) sink->record(l, ProbeSite::attn_in, normed);

        Matrix q = linear_forward(ls.q, normed);
        Matrix k = linear_forward(ls.k, normed);
        const Matrix v = linear_forward(ls.v, normed);
        for (size_t t = 0; t < T; ++t)
            for (size_t h = 0; h < nh; ++h) {
                rope_rotate_inplace(q.row(t) + h * hd, hd, t, cfg.rope_base);
                rope_rotate_inplace(k.row(t) + h * hd, hd, t, cfg.rope_base);
            }

        Matrix concat(T, d);
        std::vector<Matrix> probs(nh);
        parallel_for(nh, [&](size_t h0, size_t h1) {
            for (size_t h = h0; h < h1; ++h) {
                Matrix p(T, T);
                for (size_t t = 0; t < T; ++t) {
                    const double* qr = q.row(t) + h * hd;
                    double mx = -1e300;
                    double* pr = p.row(t);
                    for (size_t s = 0; s <= t; ++s) {
                        const double* kr = k.row(s) + h * hd;
                        double dot = 0.0;
                        for (size_t i = 0; i < hd; ++i) dot += qr[i] * kr[i];
                        pr[s] = dot * att_scale;
                        mx = std::max(mx, pr[s]);
                    }
                    double denom = 0.0;
                    for (size_t s = 0; s <= t; ++s) {
                        pr[s] = std::exp(pr[s] - mx);
                        denom += pr[s];
                    }
                    for (size_t s = 0; s <= t; ++s) pr[s] /= denom;
                    double* cr = concat.row(t) + h * hd;
                    for (size_t i = 0; i < hd; ++i) cr[i] = 0.0;
                    for (size_t s = 0; s <= t; ++s) {
                        const double* vr = v.row(s) + h * hd;
                        const double w = pr[s];
                        for (size_t i = 0; i < hd; ++i) cr[i] += w * vr[i];
                    }
                }
                probs[h] = std::move(p);
            }
        });
        if (sink) sink->record(l, ProbeSite::o_in, concat);

        const Matrix attn_out = linear_forward(ls.o, concat);
        Matrix x_mid = x;
        for (size_t i = 0; i < x_mid.size(); ++i) x_mid.data[i] += attn_out.data[i];

        Matrix ffn_normed;
        std::vector<double> ffn_rms_inv;
        rmsnorm_forward(x_mid, *ls.ffn_norm, cfg.norm_eps, ffn_normed, ffn_rms_inv);
        if (sink) sink->record(l, ProbeSite::ffn_in, ffn_normed);

        const Matrix gate_out = linear_forward(ls.gate, ffn_normed);
        const Matrix up_out = linear_forward(ls.up, ffn_normed);
        Matrix swiglu(T, cfg.d_ff);
        for (size_t i = 0; i < swiglu.size(); ++i) {
            const double g = gate_out.data[i];
            const double sig = 1.0 / (1.0 + std::exp(-g));
            swiglu.data[i] = g * sig * up_out.data[i];
        }
        if (sink) sink->record(l, ProbeSite::down_in, swiglu);

        const Matrix ffn_out = linear_forward(ls.down, swiglu);
        Matrix x_out = x_mid;
        for (size_t i = 0; i < x_out.size(); ++i) x_out.data[i] += ffn_out.data[i];

        if (lt) {
            lt->attn_normed = std::move(normed);
            lt->attn_rms_inv = std::move(rms_inv);
            lt->q = std::move(q);
            lt->k = std::move(k);
            lt->v = v;
            lt->probs = std::move(probs);
            lt->attn_concat = std::move(concat);
            lt->x_mid = x_mid;
            lt->ffn_normed = std::move(ffn_normed);
            lt->ffn_rms_inv = std::move(ffn_rms_inv);
            lt->gate_out = gate_out;
            lt->up_out = up_out;
            lt->swiglu = std::move(swiglu);
        }
        x = std::move(x_out);

        if (l == last_layer && upto_layer < cfg.n_layers) return Matrix();
    }

    Matrix final_normed;
    std::vector<double> final_rms_inv;
    rmsnorm_forward(x, *view.final_norm, cfg.norm_eps, final_normed, final_rms_inv);
    Matrix logits = linear_forward(view.head, final_normed);
    if (trace) {
        trace->x_final = std::move(x);
        trace->final_rms_inv = std::move(final_rms_inv);
        trace->final_normed = std::move(final_normed);
        trace->logits = logits;
    }
    return logits;
}

Matrix forward(const ModelCheckpoint& model, const TokenSeq& tokens) {
    return forward(make_view(model), tokens);
}

TokenSeq greedy_decode(const ModelView& view, const TokenSeq& prompt, size_t max_new) {
    const ModelConfig& cfg = view.config;
    if (prompt.size() + max_new > cfg.max_seq)
        throw validation_error("greedy_decode: prompt + max_new exceeds max_seq");
    validate_tokens(cfg, prompt);
    TokenSeq seq = prompt;
    for (size_t step = 0; step < max_new; ++step) {
        const Matrix logits = forward(view, seq);
        const double* last = logits.row(logits.rows - 1);
        size_t best = 0;
        for (size_t i = 1; i < cfg.vocab_size; ++i)
            if (last[i] > last[best]) best = i;
        seq.push_back(static_cast<Token>(best));
        if (static_cast<Token>(best) == cfg.eos_id()) break;
    }
    return seq;
}

}  // namespace quantlab
