#include "quantlab/backward.hpp"

#include <cmath>

namespace quantlab {

std::string adapter_grad_key(const std::string& target, char factor) {
    return "adapter." + target + "." + factor;
}

namespace {

struct GradSink {
    std::map<std::string, Matrix>* grads;
    const std::set<std::string>* frozen;

    bool wants(const std::string& key) const { return frozen->count(key) == 0; }

    Matrix& slot(const std::string& key, size_t rows, size_t cols) {
        auto it = grads->find(key);
        if (it == grads->end())
            it = grads->emplace(key, Matrix(rows, cols)).first;
        return it->second;
    }

    void add(const std::string& key, const Matrix& g) {
        Matrix& acc = slot(key, g.rows, g.cols);
        for (size_t i = 0; i < g.size(); ++i) acc.data[i] += g.data[i];
    }
};

// Backward through y = x W^T (+ adapter). Returns dx; accumulates weight and
// adapter-factor gradients into the sink.
Matrix linear_backward(const LinearSlot& slot, const Matrix& x, const Matrix& dy,
                       GradSink& sink) {
    Matrix dx = matmul(dy, *slot.w);
    if (sink.wants(slot.name)) sink.add(slot.name, matmul_tn(dy, x));
    if (slot.lora.attached()) {
        const double s = slot.lora.scaling;
        const std::string key_a = adapter_grad_key(slot.name, 'A');
        const std::string key_b = adapter_grad_key(slot.name, 'B');
        Matrix dz = matmul(dy, *slot.lora.b);  // T x r
        for (double& v : dz.data) v *= s;
        if (sink.wants(key_b)) {
            const Matrix z = matmul_nt(x, *slot.lora.a);  // T x r
            Matrix db = matmul_tn(dy, z);                 // d_out x r
            for (double& v : db.data) v *= s;
            sink.add(key_b, db);
        }
        if (sink.wants(key_a)) sink.add(key_a, matmul_tn(dz, x));  // r x d_in
        const Matrix dx_lora = matmul(dz, *slot.lora.a);           // T x d_in
        for (size_t i = 0; i < dx.size(); ++i) dx.data[i] += dx_lora.data[i];
    }
    return dx;
}

void sequence_backward(const ModelView& view, const ForwardTrace& trace, const Matrix& dlogits,
                       GradSink& sink) {
    const ModelConfig& cfg = view.config;
    const size_t T = trace.tokens.size();
    const size_t d = cfg.d_model;
    const size_t nh = cfg.n_heads;
    const size_t hd = cfg.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    // head + final norm
    Matrix d_final_normed = linear_backward(view.head, trace.final_normed, dlogits, sink);
    Matrix dx(T, d);
    rmsnorm_backward(trace.x_final, *view.final_norm, trace.final_rms_inv, d_final_normed, dx,
                     sink.wants("final_norm") ? &sink.slot("final_norm", 1, d) : nullptr);

    for (size_t li = cfg.n_layers; li > 0; --li) {
        const size_t l = li - 1;
        const LayerSlots& ls = view.layers[l];
        const LayerTrace& lt = trace.layers[l];

        // FFN block: x_out = x_mid + down(swiglu(gate(n), up(n)))
        Matrix dswiglu = linear_backward(ls.down, lt.swiglu, dx, sink);
        Matrix dgate(T, cfg.d_ff), dup(T, cfg.d_ff);
        for (size_t i = 0; i < dswiglu.size(); ++i) {
            const double g = lt.gate_out.data[i];
            const double sig = 1.0 / (1.0 + std::exp(-g));
            const double silu = g * sig;
            dgate.data[i] = dswiglu.data[i] * lt.up_out.data[i] * (sig + silu * (1.0 - sig));
            dup.data[i] = dswiglu.data[i] * silu;
        }
        Matrix d_ffn_normed = linear_backward(ls.gate, lt.ffn_normed, dgate, sink);
        {
            const Matrix d2 = linear_backward(ls.up, lt.ffn_normed, dup, sink);
            for (size_t i = 0; i < d_ffn_normed.size(); ++i) d_ffn_normed.data[i] += d2.data[i];
        }
        // dx currently holds d(x_out); residual passes it to x_mid unchanged
        rmsnorm_backward(lt.x_mid, *ls.ffn_norm, lt.ffn_rms_inv, d_ffn_normed, dx,
                         sink.wants(layer_tensor_name(l, "ffn_norm"))
                             ? &sink.slot(layer_tensor_name(l, "ffn_norm"), 1, d)
                             : nullptr);

        // attention block: x_mid = x_in + o(concat)
        Matrix dconcat = linear_backward(ls.o, lt.attn_concat, dx, sink);
        Matrix dq(T, d), dk(T, d), dv(T, d);
        // every write below stays inside head h's column slice, so
        // head-parallelism never aliases
        parallel_for(nh, [&](size_t h0, size_t h1) {
            for (size_t h = h0; h < h1; ++h) {
                const Matrix& p = lt.probs[h];
                for (size_t t = 0; t < T; ++t) {
                    const double* pr = p.row(t);
                    const double* doutr = dconcat.row(t) + h * hd;
                    // dp and softmax backward, row t (causal: s <= t)
                    double inner = 0.0;
                    std::vector<double> dp(t + 1);
                    for (size_t s = 0; s <= t; ++s) {
                        const double* vr = lt.v.row(s) + h * hd;
                        double dot = 0.0;
                        for (size_t i = 0; i < hd; ++i) dot += doutr[i] * vr[i];
                        dp[s] = dot;
                        inner += dot * pr[s];
                    }
                    double* dqr = dq.row(t) + h * hd;
                    for (size_t s = 0; s <= t; ++s) {
                        const double w = pr[s];
                        // dv accumulation
                        double* dvr = dv.row(s) + h * hd;
                        for (size_t i = 0; i < hd; ++i) dvr[i] += w * doutr[i];
                        const double dscore = w * (dp[s] - inner) * att_scale;
                        const double* kr = lt.k.row(s) + h * hd;
                        const double* qr = lt.q.row(t) + h * hd;
                        double* dkr = dk.row(s) + h * hd;
                        for (size_t i = 0; i < hd; ++i) {
                            dqr[i] += dscore * kr[i];
                            dkr[i] += dscore * qr[i];
                        }
                    }
                }
            }
        });
        // undo rotation (orthogonal, so the adjoint is the inverse rotation)
        for (size_t t = 0; t < T; ++t)
            for (size_t h = 0; h < nh; ++h) {
                rope_rotate_inplace(dq.row(t) + h * hd, hd, t, cfg.rope_base, -1);
                rope_rotate_inplace(dk.row(t) + h * hd, hd, t, cfg.rope_base, -1);
            }

        Matrix d_attn_normed = linear_backward(ls.q, lt.attn_normed, dq, sink);
        {
            const Matrix d2 = linear_backward(ls.k, lt.attn_normed, dk, sink);
            const Matrix d3 = linear_backward(ls.v, lt.attn_normed, dv, sink);
            for (size_t i = 0; i < d_attn_normed.size(); ++i)
                d_attn_normed.data[i] += d2.data[i] + d3.data[i];
        }
        rmsnorm_backward(lt.x_in, *ls.attn_norm, lt.attn_rms_inv, d_attn_normed, dx,
                         sink.wants(layer_tensor_name(l, "attn_norm"))
                             ? &sink.slot(layer_tensor_name(l, "attn_norm"), 1, d)
                             : nullptr);
    }

    // embedding scatter
    if (sink.wants("embed")) {
        Matrix& de = sink.slot("embed", view.embed->rows, view.embed->cols);
        for (size_t t = 0; t < T; ++t) {
            double* er = de.row(static_cast<size_t>(trace.tokens[t]));
            const double* dxr = dx.row(t);
            for (size_t i = 0; i < d; ++i) er[i] += dxr[i];
        }
    }
}

double sequence_loss_and_dlogits(const ModelConfig& cfg, const ForwardTrace& trace,
                                 double inv_total, Matrix* dlogits) {
    const size_t T = trace.tokens.size();
    const Matrix& logits = trace.logits;
    double nll = 0.0;
    if (dlogits) *dlogits = Matrix(T, cfg.vocab_size);
    for (size_t t = 0; t + 1 < T; ++t) {
        const double* lr = logits.row(t);
        const size_t target = static_cast<size_t>(trace.tokens[t + 1]);
        double mx = lr[0];
        for (size_t i = 1; i < cfg.vocab_size; ++i) mx = std::max(mx, lr[i]);
        double denom = 0.0;
        for (size_t i = 0; i < cfg.vocab_size; ++i) denom += std::exp(lr[i] - mx);
        const double log_denom = std::log(denom);
        nll += -(lr[target] - mx - log_denom);
        if (dlogits) {
            double* dr = dlogits->row(t);
            for (size_t i = 0; i < cfg.vocab_size; ++i)
                dr[i] = std::exp(lr[i] - mx) / denom * inv_total;
            dr[target] -= inv_total;
        }
    }
    return nll;
}

}  // namespace

LossResult loss_and_grads(const ModelView& view, const std::vector<TokenSeq>& batch,
                          const std::set<std::string>& frozen) {
    if (batch.empty()) throw validation_error("loss_and_grads: empty batch");
    size_t total_targets = 0;
    for (const auto& seq : batch) {
        if (seq.size() < 2)
            throw validation_error("loss_and_grads: sequences need >= 2 tokens");
        total_targets += seq.size() - 1;
    }
    const double inv_total = 1.0 / static_cast<double>(total_targets);

    LossResult result;
    GradSink sink{&result.grads, &frozen};
    double nll_sum = 0.0;
    for (const auto& seq : batch) {
        ForwardTrace trace;
        forward(view, seq, &trace);
        Matrix dlogits;
        nll_sum += sequence_loss_and_dlogits(view.config, trace, inv_total, &dlogits);
        sequence_backward(view, trace, dlogits, sink);
    }
    result.loss = nll_sum * inv_total;
    if (!std::isfinite(result.loss))
        throw numerical_error("loss_and_grads: non-finite loss");
    return result;
}

double batch_loss(const ModelView& view, const std::vector<TokenSeq>& batch) {
    if (batch.empty()) throw validation_error("batch_loss: empty batch");
    size_t total_targets = 0;
    for (const auto& seq : batch) {
        if (seq.size() < 2) throw validation_error("batch_loss: sequences need >= 2 tokens");
        total_targets += seq.size() - 1;
    }
    double nll_sum = 0.0;
    for (const auto& seq : batch) {
        ForwardTrace trace;
        forward(view, seq, &trace);
        nll_sum += sequence_loss_and_dlogits(view.config, trace, 1.0, nullptr);
    }
    return nll_sum / static_cast<double>(total_targets);
}

}  // namespace quantlab
