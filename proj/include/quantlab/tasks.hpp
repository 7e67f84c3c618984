#pragma once

#include <optional>
#include <string>
#include <vector>

#include "quantlab/model.hpp"

namespace quantlab {

// Synthetic desk-scale stand-ins for the ability tests: a few-shot
// symbol->label mapping task (the map is redrawn per episode, so it is only
// solvable from the demonstrations) and scratchpad multi-digit addition.
struct TaskSpec {
    enum class Kind { lm_ppl, icl_mapping, cot_addition };
    Kind kind = Kind::icl_mapping;
    size_t k_shots = 4;
    size_t n_episodes = 200;
    int digits = 2;        // cot_addition: 2 or 3
    uint64_t seed = 0;
    size_t seq_len = 128;  // lm_ppl window
    size_t stride = 64;    // lm_ppl stride

    const char* metric_name() const {
        return kind == Kind::lm_ppl ? "perplexity" : "accuracy";
    }
};

TaskSpec::Kind task_kind_from_string(const std::string& s);
const char* to_string(TaskSpec::Kind k);

struct Episode {
    TokenSeq prompt;     // BOS + rendered prompt bytes
    std::string gold;    // expected answer text ("1", "42", ...)
    size_t max_new = 1;
    TaskSpec::Kind kind = TaskSpec::Kind::icl_mapping;
    std::string full_text;  // prompt + answer, for training streams
};

// Episodes are generated per (spec.seed xor seed, episode index); two calls
// with the same arguments yield identical streams. Byte tasks need
// vocab_size >= 259.
std::vector<Episode> gen_icl_task(const TaskSpec& spec, uint64_t seed,
                                  const ModelConfig& cfg = ModelConfig{});
std::vector<Episode> gen_cot_task(const TaskSpec& spec, uint64_t seed,
                                  const ModelConfig& cfg = ModelConfig{});
std::vector<Episode> gen_task(const TaskSpec& spec, uint64_t seed,
                              const ModelConfig& cfg = ModelConfig{});

Episode gen_icl_episode(const TaskSpec& spec, uint64_t seed, size_t index,
                        const ModelConfig& cfg);
Episode gen_cot_episode(const TaskSpec& spec, uint64_t seed, size_t index,
                        const ModelConfig& cfg);

// Extracts the integer following the last "answer" in a decoded response.
std::optional<long> parse_answer(const std::string& text);

bool episode_matches(const Episode& ep, const std::string& decoded);

// Deterministic word-chain text: a fixed word list with seeded sparse
// successor structure. Low per-byte entropy, so a small decoder can reach
// low perplexity on it within a short training budget.
std::string make_synthetic_corpus(size_t n_bytes, uint64_t seed);

// Training-side episode-to-sequence rendering: BOS + prompt + answer + EOS.
TokenSeq episode_training_sequence(const Episode& ep, const ModelConfig& cfg);

}  // namespace quantlab
