#pragma once

#include "quantlab/evalharness.hpp"
#include "quantlab/sensitivity.hpp"
#include "quantlab/train.hpp"

namespace quantlab {

// JSON run configuration. Parsing is strict: any unknown key anywhere in the
// document is a validation error, never a silent ignore. Every command
// persists the resolved config beside its outputs.
struct CorpusConfig {
    std::string kind = "synthetic";  // synthetic | file
    std::string path;
    size_t bytes = 16384;  // synthetic corpus length

    // Loads (or generates) the corpus bytes; seeded for kind=synthetic.
    std::string load(uint64_t seed) const;
};

struct TrainSection {
    TrainHyper hyper;  // seed/frozen filled from the top level at run time
    double mix_corpus = 0.5;
    double mix_icl = 0.3;
    double mix_cot = 0.2;
    size_t icl_shots = 4;
    int cot_digits = 2;
    size_t cot_shots = 1;
};

struct QuantSection {
    std::string algo = "gptq";
    int bits = 4;
    size_t group_size = 32;
    std::string plan = "all";
    double damp_frac = 0.01;
    size_t calib_sequences = 8;
    size_t calib_seq_len = 128;
};

struct SensitivitySection {
    double tau = 6.0;
    std::string mode = "absolute";
    size_t top_n = 3;
    int bits = 2;
};

struct AdapterSection {
    std::string mode = "post";  // pre | post
    std::vector<std::string> targets = {"q", "k", "v", "o", "gate", "up", "down"};
    size_t r = 8;
    double alpha = 16.0;
    TrainSection train;
};

struct EvalSection {
    std::vector<TaskSpec> tasks;
    CorpusConfig corpus;
};

struct SweepSection {
    std::vector<std::string> precisions = {"f32", "q8", "q4", "q2"};
    std::vector<std::string> plans = {"all", "!ffn"};
};

struct RunConfig {
    uint64_t seed = 1;
    std::string output_dir = "out";
    int threads = 0;  // 0 = take QUANTLAB_THREADS or 1
    ModelConfig model;
    TrainSection train;
    QuantSection quant;
    SensitivitySection sensitivity;
    AdapterSection adapters;
    EvalSection eval;
    SweepSection sweep;

    static RunConfig defaults();
    static RunConfig from_json_text(const std::string& text);
    static RunConfig from_file(const std::string& path);
    std::string to_json_text() const;  // resolved config, canonical form
};

}  // namespace quantlab
