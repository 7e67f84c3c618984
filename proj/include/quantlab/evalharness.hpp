#pragma once

#include <functional>

#include "quantlab/qmodel.hpp"
#include "quantlab/tasks.hpp"

namespace quantlab {

using ForwardFn = std::function<Matrix(const TokenSeq&)>;

// Strided sliding-window perplexity over raw corpus bytes: windows advance
// by `stride` and only each window's last `stride` targets are scored, so
// every scored target has at least seq_len - stride context tokens.
double perplexity(const ModelView& view, const std::string& corpus, size_t seq_len,
                  size_t stride);
double perplexity_fn(const ForwardFn& fwd, const ModelConfig& cfg, const std::string& corpus,
                     size_t seq_len, size_t stride);

struct EpisodeLog {
    size_t index = 0;
    bool correct = false;
    bool overflow = false;  // prompt + max_new did not fit; scored 0
    std::string decoded;
};

struct AccuracyResult {
    double accuracy = 0.0;
    std::vector<EpisodeLog> log;
};

// Greedy decode + exact-match scoring per episode.
AccuracyResult accuracy(const ModelView& view, const std::vector<Episode>& episodes);
AccuracyResult accuracy_fn(const std::function<TokenSeq(const Episode&)>& decode,
                           const ModelConfig& cfg, const std::vector<Episode>& episodes);

// Storage accounting: f32 tensors cost n*32 bits; quantized tensors cost
// n*bits plus 64 bits (f32 scale + zero) per group. memory_bytes rounds
// each tensor up to whole bytes.
struct BitsReport {
    uint64_t total_bits = 0;
    uint64_t memory_bytes = 0;
    std::map<std::string, uint64_t> by_tensor;
};

BitsReport total_bits(const QuantizedModel& qm);
BitsReport total_bits(const ModelCheckpoint& model);

// One sweep cell per (precision, plan); every task evaluated per cell.
struct SweepRow {
    std::string precision;  // f32 | q8 | q4 | q2
    std::string plan;
    std::string task;
    std::string metric_name;
    double metric_value = 0.0;
    uint64_t total_bits = 0;
    uint64_t memory_bytes = 0;
    double wall_time_sec = 0.0;  // in-memory only; never serialized
};

struct SweepResult {
    std::vector<SweepRow> rows;
    std::vector<std::string> cell_errors;  // "<precision>/<plan>: message"
};

struct SweepSettings {
    std::vector<std::string> precisions = {"f32", "q8", "q4", "q2"};
    std::vector<std::string> plans = {"all", "!ffn"};
    size_t group_size = 32;
    QuantAlgo algo = QuantAlgo::gptq;
    double damp_frac = 0.01;
};

SweepResult run_sweep(const ModelCheckpoint& model, const SweepSettings& settings,
                      const std::vector<TaskSpec>& tasks, const std::vector<TokenSeq>& calib,
                      const std::string& corpus, uint64_t seed);

// Serialization: fixed column order, %.10g floats, \n newlines, so reruns
// are byte-identical.
std::string sweep_csv(const SweepResult& result);
std::string sweep_json(const SweepResult& result);

// Per-task trade-off curves: one x-sorted series per precision of
// (total_bits, metric) points; duplicate x values collapse to the first.
std::string sweep_plot_data(const SweepResult& result, const std::string& task);

int bits_of_precision(const std::string& precision);  // f32 -> 32, q4 -> 4 ...

std::string format_double(double v);  // %.10g

}  // namespace quantlab
