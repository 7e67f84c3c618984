#include "quantlab/evalharness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

#include <json.hpp>

namespace quantlab {

using nlohmann::json;

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

double perplexity_fn(const ForwardFn& fwd, const ModelConfig& cfg, const std::string& corpus,
                     size_t seq_len, size_t stride) {
    if (seq_len < 2 || seq_len > cfg.max_seq)
        throw validation_error("perplexity: seq_len out of range");
    if (stride < 1 || stride > seq_len)
        throw validation_error("perplexity: stride must be in [1, seq_len]");
    if (corpus.size() < seq_len + 1)
        throw validation_error("perplexity: corpus shorter than seq_len+1 bytes");

    const size_t n = corpus.size();
    double nll = 0.0;
    size_t count = 0;
    size_t scored_up_to = 0;  // first not-yet-scored target index
    for (size_t b = 0; b + 1 < n; b += stride) {
        const size_t e = std::min(b + seq_len, n);
        TokenSeq window;
        window.reserve(e - b);
        for (size_t i = b; i < e; ++i)
            window.push_back(static_cast<Token>(static_cast<unsigned char>(corpus[i])));
        const Matrix logits = fwd(window);
        size_t first = std::max(b + 1, e >= stride ? e - stride : size_t{1});
        first = std::max(first, scored_up_to);
        for (size_t g = first; g < e; ++g) {
            const double* lr = logits.row(g - b - 1);
            const auto target = static_cast<size_t>(
                static_cast<unsigned char>(corpus[g]));
            double mx = lr[0];
            for (size_t i = 1; i < cfg.vocab_size; ++i) mx = std::max(mx, lr[i]);
            double denom = 0.0;
            for (size_t i = 0; i < cfg.vocab_size; ++i) denom += std::exp(lr[i] - mx);
            nll += -(lr[target] - mx - std::log(denom));
            ++count;
        }
        scored_up_to = e;
        if (e == n) break;
    }
    if (count == 0) throw validation_error("perplexity: no targets scored");
    return std::exp(nll / static_cast<double>(count));
}

double perplexity(const ModelView& view, const std::string& corpus, size_t seq_len,
                  size_t stride) {
    return perplexity_fn([&](const TokenSeq& t) { return forward(view, t); }, view.config,
                         corpus, seq_len, stride);
}

AccuracyResult accuracy_fn(const std::function<TokenSeq(const Episode&)>& decode,
                           const ModelConfig& cfg, const std::vector<Episode>& episodes) {
    if (episodes.empty()) throw validation_error("accuracy: empty episode stream");
    AccuracyResult result;
    result.log.reserve(episodes.size());
    size_t hits = 0;
    for (size_t i = 0; i < episodes.size(); ++i) {
        const Episode& ep = episodes[i];
        EpisodeLog log;
        log.index = i;
        if (ep.prompt.size() + ep.max_new > cfg.max_seq) {
            log.overflow = true;
        } else {
            const TokenSeq full = decode(ep);
            TokenSeq generated(full.begin() + static_cast<long>(ep.prompt.size()), full.end());
            log.decoded = tokens_to_bytes(generated, cfg);
            log.correct = episode_matches(ep, log.decoded);
        }
        hits += log.correct ? 1 : 0;
        result.log.push_back(std::move(log));
    }
    result.accuracy = static_cast<double>(hits) / static_cast<double>(episodes.size());
    return result;
}

AccuracyResult accuracy(const ModelView& view, const std::vector<Episode>& episodes) {
    return accuracy_fn(
        [&](const Episode& ep) { return greedy_decode(view, ep.prompt, ep.max_new); },
        view.config, episodes);
}

static uint64_t tensor_bits(const QTensorEntry& e) {
    if (e.kind == QTensorEntry::Kind::f32)
        return static_cast<uint64_t>(e.f32.size()) * 32;
    const auto& qt = e.qt;
    const uint64_t n = qt.n_codes();
    const uint64_t groups = qt.rows * qt.groups_per_row();
    return n * static_cast<uint64_t>(qt.bits) + groups * 64;
}

BitsReport total_bits(const QuantizedModel& qm) {
    BitsReport r;
    for (const auto& name : tensor_names(qm.config)) {
        const uint64_t bits = tensor_bits(qm.entries.at(name));
        r.by_tensor.emplace(name, bits);
        r.total_bits += bits;
        r.memory_bytes += (bits + 7) / 8;
    }
    return r;
}

BitsReport total_bits(const ModelCheckpoint& model) {
    return total_bits(from_checkpoint(model));
}

int bits_of_precision(const std::string& precision) {
    if (precision == "f32") return 32;
    if (precision == "q8") return 8;
    if (precision == "q4") return 4;
    if (precision == "q2") return 2;
    throw validation_error("unknown precision '" + precision +
                           "' (valid: f32, q8, q4, q2)");
}

static double eval_task_metric(const ModelView& view, const TaskSpec& task,
                               const std::string& corpus, uint64_t seed) {
    if (task.kind == TaskSpec::Kind::lm_ppl)
        return perplexity(view, corpus, task.seq_len, task.stride);
    const auto episodes = gen_task(task, seed, view.config);
    return accuracy(view, episodes).accuracy;
}

SweepResult run_sweep(const ModelCheckpoint& model, const SweepSettings& settings,
                      const std::vector<TaskSpec>& tasks, const std::vector<TokenSeq>& calib,
                      const std::string& corpus, uint64_t seed) {
    if (settings.precisions.empty() || settings.plans.empty() || tasks.empty())
        throw validation_error("run_sweep: empty grid");
    SweepResult result;
    for (const auto& precision : settings.precisions) {
        const int bits = bits_of_precision(precision);
        for (const auto& plan_str : settings.plans) {
            const auto t0 = std::chrono::steady_clock::now();
            try {
                QuantizedModel qm;
                if (bits == 32) {
                    qm = from_checkpoint(model);
                } else {
                    const QuantPlan plan = parse_plan(plan_str, bits, settings.group_size);
                    qm = quantize_model(model, plan, calib, settings.algo,
                                        settings.damp_frac)
                             .first;
                }
                const BitsReport br = total_bits(qm);
                const ModelView view = make_view(qm);
                for (const auto& task : tasks) {
                    SweepRow row;
                    row.precision = precision;
                    row.plan = plan_str;
                    row.task = to_string(task.kind);
                    row.metric_name = task.metric_name();
                    row.metric_value = eval_task_metric(view, task, corpus, seed);
                    row.total_bits = br.total_bits;
                    row.memory_bytes = br.memory_bytes;
                    row.wall_time_sec =
                        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                            .count();
                    result.rows.push_back(std::move(row));
                }
            } catch (const std::exception& e) {
                result.cell_errors.push_back(precision + "/" + plan_str + ": " + e.what());
            }
        }
    }
    return result;
}

std::string sweep_csv(const SweepResult& result) {
    std::string out = "precision,plan,task,metric_name,metric_value,total_bits,memory_bytes\n";
    for (const auto& r : result.rows) {
        out += r.precision + "," + r.plan + "," + r.task + "," + r.metric_name + "," +
               format_double(r.metric_value) + "," + std::to_string(r.total_bits) + "," +
               std::to_string(r.memory_bytes) + "\n";
    }
    return out;
}

std::string sweep_json(const SweepResult& result) {
    json rows = json::array();
    for (const auto& r : result.rows)
        rows.push_back(json{{"precision", r.precision},
                            {"plan", r.plan},
                            {"task", r.task},
                            {"metric_name", r.metric_name},
                            {"metric_value", r.metric_value},
                            {"total_bits", r.total_bits},
                            {"memory_bytes", r.memory_bytes}});
    json j{{"rows", rows}, {"errors", result.cell_errors}};
    return j.dump(2) + "\n";
}

std::string sweep_plot_data(const SweepResult& result, const std::string& task) {
    std::string out;
    bool found = false;
    // series appear in first-seen precision order; points sort by total_bits
    std::vector<std::string> precisions;
    for (const auto& r : result.rows)
        if (r.task == task) {
            found = true;
            bool seen = false;
            for (const auto& p : precisions) seen |= (p == r.precision);
            if (!seen) precisions.push_back(r.precision);
        }
    if (!found) throw validation_error("sweep_plot_data: no rows for task '" + task + "'");
    for (const auto& p : precisions) {
        std::vector<std::pair<uint64_t, double>> pts;
        for (const auto& r : result.rows)
            if (r.task == task && r.precision == p) pts.emplace_back(r.total_bits, r.metric_value);
        std::sort(pts.begin(), pts.end());
        out += "# series " + p + "\n";
        uint64_t last_x = 0;
        bool first = true;
        for (const auto& [x, y] : pts) {
            if (!first && x == last_x) continue;  // identical cell repeated across plans
            out += std::to_string(x) + " " + format_double(y) + "\n";
            last_x = x;
            first = false;
        }
        out += "\n";
    }
    return out;
}

}  // namespace quantlab
