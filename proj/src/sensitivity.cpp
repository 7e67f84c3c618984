#include "quantlab/sensitivity.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "quantlab/evalharness.hpp"

namespace quantlab {

OutlierMode outlier_mode_from_string(const std::string& s) {
    if (s == "absolute") return OutlierMode::absolute;
    if (s == "relative") return OutlierMode::relative;
    throw validation_error("unknown outlier mode '" + s + "' (valid: absolute, relative)");
}

namespace {

constexpr ProbeSite kSites[4] = {ProbeSite::attn_in, ProbeSite::o_in, ProbeSite::ffn_in,
                                 ProbeSite::down_in};

struct MaxAbsSink final : CaptureSink {
    size_t n_layers;
    // [layer][site] -> per-dim max-abs
    std::vector<std::array<std::vector<double>, 4>> stats;

    explicit MaxAbsSink(size_t layers) : n_layers(layers), stats(layers) {}

    static size_t site_index(ProbeSite s) {
        switch (s) {
            case ProbeSite::attn_in: return 0;
            case ProbeSite::o_in: return 1;
            case ProbeSite::ffn_in: return 2;
            case ProbeSite::down_in: return 3;
        }
        return 0;
    }

    void record(size_t layer, ProbeSite site, const Matrix& x) override {
        auto& v = stats[layer][site_index(site)];
        if (v.size() < x.cols) v.resize(x.cols, 0.0);
        for (size_t t = 0; t < x.rows; ++t) {
            const double* row = x.row(t);
            for (size_t i = 0; i < x.cols; ++i) v[i] = std::max(v[i], std::fabs(row[i]));
        }
    }
};

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

OutlierReport detect_outliers(const ModelView& model, const std::vector<TokenSeq>& probe,
                              double tau, OutlierMode mode) {
    if (probe.empty()) throw validation_error("detect_outliers: empty probe corpus");
    if (!(tau > 0.0)) throw validation_error("detect_outliers: tau must be > 0");
    const size_t n_layers = model.config.n_layers;
    MaxAbsSink sink(n_layers);
    for (const auto& seq : probe) forward(model, seq, nullptr, &sink);

    size_t span = 0;
    for (const auto& layer : sink.stats)
        for (const auto& site : layer) span = std::max(span, site.size());

    // flagged[dim] per layer
    std::map<size_t, OutlierRecord> flagged;
    for (size_t l = 0; l < n_layers; ++l) {
        for (size_t s = 0; s < 4; ++s) {
            const auto& site = sink.stats[l][s];
            if (site.empty()) continue;
            const double cut =
                mode == OutlierMode::absolute ? tau : tau * median_of(site);
            for (size_t d = 0; d < site.size(); ++d) {
                if (!(site[d] >= cut)) continue;
                OutlierRecord& rec = flagged[d];
                if (rec.per_layer_max_abs.empty()) {
                    rec.dim = d;
                    rec.per_layer_max_abs.assign(n_layers, 0.0);
                }
                if (rec.per_layer_max_abs[l] == 0.0) ++rec.layers_affected;
                rec.per_layer_max_abs[l] = std::max(rec.per_layer_max_abs[l], site[d]);
                rec.global_max_abs = std::max(rec.global_max_abs, site[d]);
            }
        }
    }

    OutlierReport report;
    report.threshold = tau;
    report.mode = mode;
    report.feature_span = span;
    for (auto& [d, rec] : flagged) report.ranked.push_back(std::move(rec));
    std::sort(report.ranked.begin(), report.ranked.end(),
              [](const OutlierRecord& a, const OutlierRecord& b) {
                  if (a.layers_affected != b.layers_affected)
                      return a.layers_affected > b.layers_affected;
                  if (a.global_max_abs != b.global_max_abs)
                      return a.global_max_abs > b.global_max_abs;
                  return a.dim < b.dim;
              });
    return report;
}

Matrix mixed_matmul_int8(const Matrix& x, const Matrix& w,
                         const std::set<size_t>& outlier_dims) {
    if (x.cols != w.rows) throw validation_error("mixed_matmul_int8: dimension mismatch");
    const size_t d = x.cols;
    const size_t out = w.cols;
    for (size_t o : outlier_dims)
        if (o >= d) throw validation_error("mixed_matmul_int8: outlier dim out of range");
    std::vector<char> keep_fp(d, 0);
    for (size_t o : outlier_dims) keep_fp[o] = 1;

    // per-token row scales over the int8 dims
    std::vector<double> sx(x.rows, 1.0);
    for (size_t t = 0; t < x.rows; ++t) {
        double mx = 0.0;
        const double* xr = x.row(t);
        for (size_t k = 0; k < d; ++k)
            if (!keep_fp[k]) mx = std::max(mx, std::fabs(xr[k]));
        sx[t] = mx > 0.0 ? mx / 127.0 : 1.0;
    }
    // per-output-column scales
    std::vector<double> sw(out, 1.0);
    for (size_t j = 0; j < out; ++j) {
        double mx = 0.0;
        for (size_t k = 0; k < d; ++k)
            if (!keep_fp[k]) mx = std::max(mx, std::fabs(w.at(k, j)));
        sw[j] = mx > 0.0 ? mx / 127.0 : 1.0;
    }

    auto q8 = [](double v, double s) {
        const long long r = std::llround(v / s);
        return static_cast<int>(std::clamp(r, -127ll, 127ll));
    };
    std::vector<int> qw(d * out);
    for (size_t k = 0; k < d; ++k)
        if (!keep_fp[k])
            for (size_t j = 0; j < out; ++j) qw[k * out + j] = q8(w.at(k, j), sw[j]);

    Matrix y(x.rows, out);
    parallel_for(x.rows, [&](size_t t0, size_t t1) {
        std::vector<int> qx(d, 0);
        std::vector<int64_t> acc(out);
        for (size_t t = t0; t < t1; ++t) {
            const double* xr = x.row(t);
            for (size_t k = 0; k < d; ++k)
                if (!keep_fp[k]) qx[k] = q8(xr[k], sx[t]);
            std::fill(acc.begin(), acc.end(), 0);
            for (size_t k = 0; k < d; ++k) {
                if (keep_fp[k] || qx[k] == 0) continue;
                const int64_t xk = qx[k];
                const int* wrow = qw.data() + k * out;
                for (size_t j = 0; j < out; ++j) acc[j] += xk * wrow[j];
            }
            double* yr = y.row(t);
            for (size_t j = 0; j < out; ++j)
                yr[j] = static_cast<double>(acc[j]) * sx[t] * sw[j];
            // full-precision path for the preserved dims, ascending k
            for (size_t k = 0; k < d; ++k) {
                if (!keep_fp[k]) continue;
                const double xk = xr[k];
                const double* wrow = w.row(k);
                for (size_t j = 0; j < out; ++j) yr[j] += xk * wrow[j];
            }
        }
    });
    return y;
}

Matrix forward_int8(const ModelView& view, const TokenSeq& tokens,
                    const std::set<size_t>& outlier_dims) {
    const ModelConfig& cfg = view.config;
    validate_tokens(cfg, tokens);
    const size_t T = tokens.size();
    const size_t d = cfg.d_model;
    const size_t nh = cfg.n_heads;
    const size_t hd = cfg.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    auto project = [&](const LinearSlot& slot, const Matrix& in) {
        std::set<size_t> dims;
        for (size_t o : outlier_dims)
            if (o < in.cols) dims.insert(o);
        return mixed_matmul_int8(in, slot.wt, dims);
    };

    Matrix x(T, d);
    for (size_t t = 0; t < T; ++t) {
        const double* e = view.embed->row(static_cast<size_t>(tokens[t]));
        for (size_t i = 0; i < d; ++i) x.at(t, i) = e[i];
    }

    for (size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerSlots& ls = view.layers[l];
        Matrix normed;
        std::vector<double> rms_inv;
        rmsnorm_forward(x, *ls.attn_norm, cfg.norm_eps, normed, rms_inv);
        Matrix q = project(ls.q, normed);
        Matrix k = project(ls.k, normed);
        const Matrix v = project(ls.v, normed);
        for (size_t t = 0; t < T; ++t)
            for (size_t h = 0; h < nh; ++h) {
                rope_rotate_inplace(q.row(t) + h * hd, hd, t, cfg.rope_base);
                rope_rotate_inplace(k.row(t) + h * hd, hd, t, cfg.rope_base);
            }
        Matrix concat(T, d);
        for (size_t h = 0; h < nh; ++h) {
            for (size_t t = 0; t < T; ++t) {
                std::vector<double> p(t + 1);
                const double* qr = q.row(t) + h * hd;
                double mx = -1e300;
                for (size_t s = 0; s <= t; ++s) {
                    const double* kr = k.row(s) + h * hd;
                    double dot = 0.0;
                    for (size_t i = 0; i < hd; ++i) dot += qr[i] * kr[i];
                    p[s] = dot * att_scale;
                    mx = std::max(mx, p[s]);
                }
                double denom = 0.0;
                for (size_t s = 0; s <= t; ++s) {
                    p[s] = std::exp(p[s] - mx);
                    denom += p[s];
                }
                double* cr = concat.row(t) + h * hd;
                for (size_t i = 0; i < hd; ++i) cr[i] = 0.0;
                for (size_t s = 0; s <= t; ++s) {
                    const double wgt = p[s] / denom;
                    const double* vr = v.row(s) + h * hd;
                    for (size_t i = 0; i < hd; ++i) cr[i] += wgt * vr[i];
                }
            }
        }
        const Matrix attn_out = project(ls.o, concat);
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += attn_out.data[i];

        Matrix ffn_normed;
        std::vector<double> ffn_rms;
        rmsnorm_forward(x, *ls.ffn_norm, cfg.norm_eps, ffn_normed, ffn_rms);
        const Matrix gate_out = project(ls.gate, ffn_normed);
        const Matrix up_out = project(ls.up, ffn_normed);
        Matrix swiglu(T, cfg.d_ff);
        for (size_t i = 0; i < swiglu.size(); ++i) {
            const double g = gate_out.data[i];
            swiglu.data[i] = g / (1.0 + std::exp(-g)) * up_out.data[i];
        }
        const Matrix ffn_out = project(ls.down, swiglu);
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += ffn_out.data[i];
    }

    Matrix final_normed;
    std::vector<double> final_rms;
    rmsnorm_forward(x, *view.final_norm, cfg.norm_eps, final_normed, final_rms);
    return matmul(final_normed, view.head.wt);
}

CrucialRanking rank_crucial(const ErrorReport& report, size_t k) {
    if (k > 7) throw validation_error("rank_crucial: k must be <= 7");
    CrucialRanking r;
    std::map<ProjectionType, std::pair<double, size_t>> acc;
    for (const auto& [name, row] : report.rows) {
        if (row.type == ProjectionType::embed || row.type == ProjectionType::head) continue;
        auto& a = acc[row.type];
        a.first += row.rel_recon_error;
        a.second += 1;
    }
    for (ProjectionType t : kProjectionOrder)
        if (acc.find(t) == acc.end())
            throw validation_error(std::string("rank_crucial: report missing type '") +
                                   to_string(t) + "'");
    for (ProjectionType t : kProjectionOrder)
        r.mean_error[t] = acc[t].first / static_cast<double>(acc[t].second);

    r.ordered.assign(std::begin(kProjectionOrder), std::end(kProjectionOrder));
    std::stable_sort(r.ordered.begin(), r.ordered.end(),
                     [&](ProjectionType a, ProjectionType b) {
                         return r.mean_error[a] > r.mean_error[b];
                     });
    r.top.assign(r.ordered.begin(), r.ordered.begin() + static_cast<long>(k));
    return r;
}

QuantPlan make_crucial_plan(const ErrorReport& report, int bits, size_t group_size) {
    const CrucialRanking ranking = rank_crucial(report, 7);
    QuantPlan plan;
    plan.default_bits = bits;
    plan.group_size = group_size;
    plan.preserve_types.insert(ProjectionType::down);
    size_t taken = 0;
    for (ProjectionType t : ranking.ordered) {
        if (taken == 2) break;
        if (is_attention_type(t)) {
            plan.preserve_types.insert(t);
            ++taken;
        }
    }
    return plan;
}

SensitivityTable run_sensitivity_suite(const ModelCheckpoint& model, int bits,
                                       const std::vector<TokenSeq>& calib,
                                       const std::string& corpus,
                                       const std::vector<TaskSpec>& tasks, QuantAlgo algo,
                                       uint64_t seed) {
    if (bits != 2 && bits != 4)
        throw validation_error("sensitivity suite runs at 2 or 4 bits");
    if (tasks.empty()) throw validation_error("sensitivity suite needs >= 1 task");

    SensitivityTable table;
    ErrorReport all_report;
    const std::vector<std::string> plan_names = {"f32", "all", "!att", "!ffn", "!crucial"};
    for (const auto& plan_name : plan_names) {
        QuantizedModel qm;
        if (plan_name == "f32") {
            qm = from_checkpoint(model);
        } else if (plan_name == "!crucial") {
            const QuantPlan plan = make_crucial_plan(all_report, bits, 32);
            qm = quantize_model(model, plan, calib, algo).first;
        } else {
            const QuantPlan plan = parse_plan(plan_name, bits, 32);
            auto [q, report] = quantize_model(model, plan, calib, algo);
            qm = std::move(q);
            if (plan_name == "all") all_report = std::move(report);
        }
        const BitsReport br = total_bits(qm);
        const ModelView view = make_view(qm);
        for (const auto& task : tasks) {
            SensitivityRow row;
            row.plan = plan_name;
            row.bits = plan_name == "f32" ? 32 : bits;
            row.task = to_string(task.kind);
            // the pinned CSV schema has no task column, so qualify the metric
            row.metric_name = std::string(to_string(task.kind)) + "_" + task.metric_name();
            if (task.kind == TaskSpec::Kind::lm_ppl) {
                row.metric_value = perplexity(view, corpus, task.seq_len, task.stride);
            } else {
                row.metric_value = accuracy(view, gen_task(task, seed, view.config)).accuracy;
            }
            row.total_bits = br.total_bits;
            row.memory_bytes = br.memory_bytes;
            table.rows.push_back(std::move(row));
        }
    }
    return table;
}

std::string sensitivity_csv(const SensitivityTable& table) {
    std::string out = "plan,bits,metric_name,metric_value,total_bits,memory_bytes\n";
    for (const auto& r : table.rows)
        out += r.plan + "," + std::to_string(r.bits) + "," + r.metric_name + "," +
               format_double(r.metric_value) + "," + std::to_string(r.total_bits) + "," +
               std::to_string(r.memory_bytes) + "\n";
    return out;
}

}  // namespace quantlab
