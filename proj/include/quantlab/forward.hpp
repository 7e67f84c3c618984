#pragma once

#include <cstddef>
#include <set>
#include <vector>

#include "quantlab/model.hpp"

namespace quantlab {

// Non-owning reference to a low-rank adapter pair attached to one projection.
// y = x W^T + scaling * (x A^T) B^T; a is r x d_in, b is d_out x r.
struct LoraRef {
    const Matrix* a = nullptr;
    const Matrix* b = nullptr;
    double scaling = 1.0;
    bool attached() const { return a != nullptr; }
};

// One projection as seen by the forward pass: effective weights plus an
// optional adapter. `wt` caches the transpose so the hot loop runs the
// cache-friendly kernel; it must be rebuilt whenever *w changes.
struct LinearSlot {
    std::string name;        // gradient key ("embed" for a tied head)
    const Matrix* w = nullptr;  // d_out x d_in
    Matrix wt;                  // d_in x d_out
    LoraRef lora;
};

struct LayerSlots {
    const Matrix* attn_norm = nullptr;
    const Matrix* ffn_norm = nullptr;
    LinearSlot q, k, v, o, gate, up, down;
};

// A resolved, read-only lens over some model representation (checkpoint,
// quantized model, adapter set). The underlying matrices must outlive the
// view. Rebuild after mutating weights (training loops do this per step).
struct ModelView {
    ModelConfig config;
    const Matrix* embed = nullptr;
    const Matrix* final_norm = nullptr;
    std::vector<LayerSlots> layers;
    LinearSlot head;
};

ModelView make_view(const ModelCheckpoint& model);

// Attaches an adapter to the slot whose gradient key equals `target`.
void attach_lora(ModelView& view, const std::string& target, const LoraRef& ref);

// Activation tap points: the inputs of the seven projection matmuls.
// attn_in feeds q/k/v, ffn_in feeds gate/up.
enum class ProbeSite { attn_in, o_in, ffn_in, down_in };

struct CaptureSink {
    virtual ~CaptureSink() = default;
    virtual void record(size_t layer, ProbeSite site, const Matrix& x) = 0;
};

struct LayerTrace {
    Matrix x_in;
    Matrix attn_normed;
    std::vector<double> attn_rms_inv;
    Matrix q, k, v;              // q,k are post-rotation
    std::vector<Matrix> probs;   // per head, causal softmax rows
    Matrix attn_concat;
    Matrix x_mid;
    Matrix ffn_normed;
    std::vector<double> ffn_rms_inv;
    Matrix gate_out, up_out, swiglu;
};

struct ForwardTrace {
    TokenSeq tokens;
    std::vector<LayerTrace> layers;
    Matrix x_final;
    std::vector<double> final_rms_inv;
    Matrix final_normed;
    Matrix logits;
};

// Causal forward pass; logits are seq x vocab. With `sink`, records
// projection inputs; with `upto_layer` < n_layers, stops after that layer
// (logits are then empty). Position t never reads tokens > t.
Matrix forward(const ModelView& view, const TokenSeq& tokens, ForwardTrace* trace = nullptr,
               CaptureSink* sink = nullptr, size_t upto_layer = SIZE_MAX);

Matrix forward(const ModelCheckpoint& model, const TokenSeq& tokens);

// In-place rotary embedding over (v[2i], v[2i+1]) pairs with angle
// position * base^(-2i / head_dim); sign=-1 applies the inverse rotation.
void rope_rotate_inplace(double* v, size_t head_dim, size_t position, double base,
                         int sign = +1);

// Pure variant matching the operation contract (head_dim = v.size()).
std::vector<double> rope_rotate(const std::vector<double>& v, size_t position, double base);

// Argmax decoding; ties resolve to the lowest token id. Appends until EOS or
// max_new tokens; returns prompt + generated (including EOS if emitted).
TokenSeq greedy_decode(const ModelView& view, const TokenSeq& prompt, size_t max_new);

// RMSNorm building blocks shared by forward and backward.
void rmsnorm_forward(const Matrix& x, const Matrix& w, double eps, Matrix& y,
                     std::vector<double>& rms_inv);
void rmsnorm_backward(const Matrix& x, const Matrix& w, const std::vector<double>& rms_inv,
                      const Matrix& dy, Matrix& dx_accum, Matrix* dw_accum);

void validate_tokens(const ModelConfig& cfg, const TokenSeq& tokens);

}  // namespace quantlab
