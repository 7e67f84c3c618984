#pragma once

#include "quantlab/qmodel.hpp"
#include "quantlab/tasks.hpp"

namespace quantlab {

// Activation-outlier analysis over the seven projection inputs. A dimension
// is its feature index at the probe site; q/k/v and gate/up sites read the
// (normed) residual stream, o reads the head-concat output, down reads the
// SwiGLU output (d_ff-wide). Flagged dims are ranked by how many layers they
// affect, then by global magnitude, then by index.
struct OutlierRecord {
    size_t dim = 0;
    size_t layers_affected = 0;
    double global_max_abs = 0.0;
    std::vector<double> per_layer_max_abs;  // n_layers entries
};

enum class OutlierMode { absolute, relative };
OutlierMode outlier_mode_from_string(const std::string& s);

struct OutlierReport {
    std::vector<OutlierRecord> ranked;
    double threshold = 6.0;
    OutlierMode mode = OutlierMode::absolute;
    size_t feature_span = 0;  // max probe-site width
};

// absolute: flag dim at a site when max|activation| >= tau (default 6.0);
// relative: when max|activation| >= tau * median of that site's per-dim
// max-abs. layers_affected counts layers with >= 1 flagged site.
OutlierReport detect_outliers(const ModelView& model, const std::vector<TokenSeq>& probe,
                              double tau, OutlierMode mode);

// Y = X[:,O] W[O,:] in full precision plus the int8 path over the rest:
// per-token symmetric absmax scaling of X, per-output-column scaling of W,
// 64-bit integer accumulation, rescale. Zero rows/columns get scale 1.
// x is tokens x d, w is d x out.
Matrix mixed_matmul_int8(const Matrix& x, const Matrix& w, const std::set<size_t>& outlier_dims);

// Forward pass where all seven projections run through mixed_matmul_int8
// with the given preserved dims (embed/head/norms stay f64).
Matrix forward_int8(const ModelView& view, const TokenSeq& tokens,
                    const std::set<size_t>& outlier_dims);

struct CrucialRanking {
    std::map<ProjectionType, double> mean_error;  // across layers
    std::vector<ProjectionType> ordered;          // descending error
    std::vector<ProjectionType> top;              // first k
};

// Mean relative reconstruction error per projection type, descending; ties
// resolve in fixed order q,k,v,o,gate,up,down. The report must cover all
// seven types.
CrucialRanking rank_crucial(const ErrorReport& report, size_t k);

// "!crucial": preserve the FFN down projection plus the top-2 attention
// types by aggregated error.
QuantPlan make_crucial_plan(const ErrorReport& report, int bits, size_t group_size);

struct SensitivityRow {
    std::string plan;
    int bits = 0;
    std::string task;
    std::string metric_name;
    double metric_value = 0.0;
    uint64_t total_bits = 0;
    uint64_t memory_bytes = 0;
};

struct SensitivityTable {
    std::vector<SensitivityRow> rows;
};

// Evaluates plans {all, !att, !ffn, !crucial} at the given width over the
// configured tasks. Row order is fixed by (plan, task) grid order.
SensitivityTable run_sensitivity_suite(const ModelCheckpoint& model, int bits,
                                       const std::vector<TokenSeq>& calib,
                                       const std::string& corpus,
                                       const std::vector<TaskSpec>& tasks, QuantAlgo algo,
                                       uint64_t seed);

std::string sensitivity_csv(const SensitivityTable& table);

}  // namespace quantlab
