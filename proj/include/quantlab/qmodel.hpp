#pragma once

#include <set>

#include "quantlab/forward.hpp"
#include "quantlab/gptq.hpp"

namespace quantlab {

// Which tensors stay at full precision. "all" quantizes every projection;
// the component masks preserve attention (q,k,v,o) or FFN (gate,up,down).
// embed/head are preserved unless listed in quantize_extras. Norm weights
// are never quantized.
struct QuantPlan {
    int default_bits = 4;
    size_t group_size = 32;
    std::set<ProjectionType> preserve_types;
    std::set<std::string> preserve_names;
    std::map<ProjectionType, int> bits_override;
    std::set<ProjectionType> quantize_extras;  // subset of {embed, head}

    int bits_for(ProjectionType t) const;
    bool preserves(const std::string& name, ProjectionType t) const;
};

// "all" | "!att" | "!ffn"; "!crucial" needs an ErrorReport and is assembled
// by make_crucial_plan.
QuantPlan parse_plan(const std::string& plan, int bits, size_t group_size);

enum class QuantAlgo { rtn, gptq };
QuantAlgo algo_from_string(const std::string& s);
const char* to_string(QuantAlgo a);

struct QTensorEntry {
    enum class Kind { f32, quantized };
    Kind kind = Kind::f32;
    Matrix f32;
    QuantizedTensor qt;
    Matrix dequant;  // always usable: == f32 for full-precision entries

    const Matrix& effective() const { return dequant; }
};

struct QuantizedModel {
    ModelConfig config;
    std::map<std::string, QTensorEntry> entries;
    uint32_t format_version = 1;
};

struct TensorErrorRow {
    ProjectionType type;
    int bits = 0;
    size_t group_size = 0;
    double rel_recon_error = 0.0;
};

struct ErrorReport {
    std::map<std::string, TensorErrorRow> rows;  // quantized tensors only
    std::map<ProjectionType, double> per_type_mean;

    void finalize();  // fills per_type_mean from rows
};

// Sequentially quantizes projections layer by layer: layer l's calibration
// activations are captured under already-quantized layers < l. q/k/v share
// one Hessian (they read the same normed input), as do gate/up. calib is
// required for gptq; with rtn an empty calib degrades the report to
// weight-space errors (identity Hessian).
std::pair<QuantizedModel, ErrorReport> quantize_model(const ModelCheckpoint& model,
                                                      const QuantPlan& plan,
                                                      const std::vector<TokenSeq>& calib,
                                                      QuantAlgo algo,
                                                      double damp_frac = 0.01);

ModelView make_view(const QuantizedModel& qm);

Matrix forward(const QuantizedModel& qm, const TokenSeq& tokens);

// Checkpoint whose tensors are the dequantized copies; forward over it is
// bit-identical to forward over the quantized model.
ModelCheckpoint to_checkpoint(const QuantizedModel& qm);

QuantizedModel from_checkpoint(const ModelCheckpoint& model);  // all-f32 entries

void validate_quantized_model(const QuantizedModel& qm);

// Deterministic calibration sampling: n sequences of seq_len+1 tokens drawn
// from the corpus byte stream.
std::vector<TokenSeq> sample_calibration(const std::string& corpus, size_t n_sequences,
                                         size_t seq_len, uint64_t seed);

}  // namespace quantlab
