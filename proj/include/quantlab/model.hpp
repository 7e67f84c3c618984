#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "quantlab/matrix.hpp"

namespace quantlab {

using Token = int32_t;
using TokenSeq = std::vector<Token>;

// LLaMA-style decoder: RMSNorm, rotary multi-head attention (q/k/v/o),
// SwiGLU FFN (gate/up/down). Byte-level tokenizer: ids 0..255 are raw bytes,
// then BOS, EOS, PAD.
struct ModelConfig {
    size_t vocab_size = 259;
    size_t d_model = 128;
    size_t n_layers = 4;
    size_t n_heads = 4;
    size_t d_ff = 256;
    size_t max_seq = 256;
    double rope_base = 10000.0;
    bool tie_embeddings = false;
    double norm_eps = 1e-5;

    size_t head_dim() const { return d_model / n_heads; }
    Token bos_id() const { return static_cast<Token>(vocab_size - 3); }
    Token eos_id() const { return static_cast<Token>(vocab_size - 2); }
    Token pad_id() const { return static_cast<Token>(vocab_size - 1); }

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Named tensors, keyed by canonical name:
//   embed, layer.<i>.attn_norm, layer.<i>.attn.{q,k,v,o},
//   layer.<i>.ffn_norm, layer.<i>.ffn.{gate,up,down}, final_norm, head.
// Projections are stored (d_out x d_in); quantization groups run along the
// input dimension (a row's columns). "head" is absent when tie_embeddings.
struct ModelCheckpoint {
    ModelConfig config;
    std::map<std::string, Matrix> tensors;
    uint32_t format_version = 1;
};

std::string layer_tensor_name(size_t layer, const std::string& suffix);

// All tensor names for a config, in canonical (embed, layers, final, head) order.
std::vector<std::string> tensor_names(const ModelConfig& cfg);

// (rows, cols) for a canonical tensor name.
std::pair<size_t, size_t> tensor_shape(const ModelConfig& cfg, const std::string& name);

// Projection type of a tensor name; nullopt for norms.
std::optional<ProjectionType> projection_of(const std::string& name);

bool is_norm_tensor(const std::string& name);

// Weights ~ Normal(0, 0.02^2), norm weights = 1. Deterministic per seed:
// each tensor draws from its own counter stream keyed by (seed, name).
ModelCheckpoint init_model(const ModelConfig& cfg, uint64_t seed);

size_t param_count(const ModelCheckpoint& model);

void validate_checkpoint(const ModelCheckpoint& model);

TokenSeq bytes_to_tokens(const std::string& text);
std::string tokens_to_bytes(const TokenSeq& tokens, const ModelConfig& cfg);

}  // namespace quantlab
