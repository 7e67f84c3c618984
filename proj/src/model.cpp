#include "quantlab/model.hpp"

#include <cmath>

#include "quantlab/rng.hpp"

namespace quantlab {

void ModelConfig::validate() const {
    if (vocab_size < 3) throw validation_error("config: vocab_size must be >= 3");
    if (d_model == 0 || n_heads == 0 || n_layers == 0 || d_ff == 0)
        throw validation_error("config: dimensions must be positive");
    if (d_model % n_heads != 0)
        throw validation_error("config: d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0)
        throw validation_error("config: head_dim must be even for rotary embeddings");
    if (max_seq < 2) throw validation_error("config: max_seq must be >= 2");
    if (rope_base <= 0.0) throw validation_error("config: rope_base must be positive");
    if (norm_eps <= 0.0) throw validation_error("config: norm_eps must be positive");
}

std::string layer_tensor_name(size_t layer, const std::string& suffix) {
    return "layer." + std::to_string(layer) + "." + suffix;
}

std::vector<std::string> tensor_names(const ModelConfig& cfg) {
    std::vector<std::string> names;
    names.push_back("embed");
    for (size_t l = 0; l < cfg.n_layers; ++l) {
        names.push_back(layer_tensor_name(l, "attn_norm"));
        names.push_back(layer_tensor_name(l, "attn.q"));
        names.push_back(layer_tensor_name(l, "attn.k"));
        names.push_back(layer_tensor_name(l, "attn.v"));
        names.push_back(layer_tensor_name(l, "attn.o"));
        names.push_back(layer_tensor_name(l, "ffn_norm"));
        names.push_back(layer_tensor_name(l, "ffn.gate"));
        names.push_back(layer_tensor_name(l, "ffn.up"));
        names.push_back(layer_tensor_name(l, "ffn.down"));
    }
    names.push_back("final_norm");
    if (!cfg.tie_embeddings) names.push_back("head");
    return names;
}

std::pair<size_t, size_t> tensor_shape(const ModelConfig& cfg, const std::string& name) {
    if (name == "embed" || name == "head") return {cfg.vocab_size, cfg.d_model};
    if (name == "final_norm") return {1, cfg.d_model};
    if (name.rfind("layer.", 0) == 0) {
        const size_t dot = name.find('.', 6);
        if (dot != std::string::npos) {
            const std::string suffix = name.substr(dot + 1);
            if (suffix == "attn_norm" || suffix == "ffn_norm") return {1, cfg.d_model};
            if (suffix == "attn.q" || suffix == "attn.k" || suffix == "attn.v" ||
                suffix == "attn.o")
                return {cfg.d_model, cfg.d_model};
            if (suffix == "ffn.gate" || suffix == "ffn.up") return {cfg.d_ff, cfg.d_model};
            if (suffix == "ffn.down") return {cfg.d_model, cfg.d_ff};
        }
    }
    throw validation_error("unknown tensor name: '" + name + "'");
}

std::optional<ProjectionType> projection_of(const std::string& name) {
    if (name == "embed") return ProjectionType::embed;
    if (name == "head") return ProjectionType::head;
    auto ends_with = [&](const char* s) {
        const std::string suf(s);
        return name.size() >= suf.size() &&
               name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    if (name.rfind("layer.", 0) == 0) {
        if (ends_with(".attn.q")) return ProjectionType::q;
        if (ends_with(".attn.k")) return ProjectionType::k;
        if (ends_with(".attn.v")) return ProjectionType::v;
        if (ends_with(".attn.o")) return ProjectionType::o;
        if (ends_with(".ffn.gate")) return ProjectionType::gate;
        if (ends_with(".ffn.up")) return ProjectionType::up;
        if (ends_with(".ffn.down")) return ProjectionType::down;
    }
    return std::nullopt;
}

bool is_norm_tensor(const std::string& name) {
    return name == "final_norm" ||
           (name.size() > 5 && name.compare(name.size() - 5, 5, "_norm") == 0);
}

ModelCheckpoint init_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelCheckpoint model;
    model.config = cfg;
    for (const auto& name : tensor_names(cfg)) {
        const auto [r, c] = tensor_shape(cfg, name);
        if (is_norm_tensor(name)) {
            model.tensors.emplace(name, Matrix(r, c, 1.0));
        } else {
            Matrix w = seeded_normal(r, c, 0.0, 0.02, sub_seed(seed, name));
            // snap to f32, the checkpoint storage precision, so a fresh model
            // round-trips through files bit-exactly
            for (double& v : w.data) v = static_cast<double>(static_cast<float>(v));
            model.tensors.emplace(name, std::move(w));
        }
    }
    return model;
}

size_t param_count(const ModelCheckpoint& model) {
    size_t n = 0;
    for (const auto& [name, t] : model.tensors) n += t.size();
    return n;
}

void validate_checkpoint(const ModelCheckpoint& model) {
    model.config.validate();
    const auto names = tensor_names(model.config);
    if (names.size() != model.tensors.size())
        throw validation_error("checkpoint: tensor count mismatch");
    for (const auto& name : names) {
        auto it = model.tensors.find(name);
        if (it == model.tensors.end())
            throw validation_error("checkpoint: missing tensor '" + name + "'");
        const auto [r, c] = tensor_shape(model.config, name);
        if (it->second.rows != r || it->second.cols != c)
            throw validation_error("checkpoint: tensor '" + name + "' has wrong shape");
        if (!it->second.all_finite())
            throw validation_error("checkpoint: tensor '" + name + "' has non-finite values");
    }
}

TokenSeq bytes_to_tokens(const std::string& text) {
    TokenSeq t;
    t.reserve(text.size());
    for (unsigned char c : text) t.push_back(static_cast<Token>(c));
    return t;
}

std::string tokens_to_bytes(const TokenSeq& tokens, const ModelConfig& cfg) {
    std::string s;
    s.reserve(tokens.size());
    for (Token t : tokens)
        if (t >= 0 && t < 256) s.push_back(static_cast<char>(t));
    (void)cfg;
    return s;
}

}  // namespace quantlab
