#include "quantlab/tasks.hpp"

#include <array>

#include "quantlab/rng.hpp"

namespace quantlab {

TaskSpec::Kind task_kind_from_string(const std::string& s) {
    if (s == "lm_ppl") return TaskSpec::Kind::lm_ppl;
    if (s == "icl_mapping") return TaskSpec::Kind::icl_mapping;
    if (s == "cot_addition") return TaskSpec::Kind::cot_addition;
    throw validation_error("unknown task kind: '" + s + "'");
}

const char* to_string(TaskSpec::Kind k) {
    switch (k) {
        case TaskSpec::Kind::lm_ppl: return "lm_ppl";
        case TaskSpec::Kind::icl_mapping: return "icl_mapping";
        case TaskSpec::Kind::cot_addition: return "cot_addition";
    }
    return "?";
}

static TokenSeq prompt_tokens(const std::string& text, const ModelConfig& cfg) {
    if (cfg.vocab_size < 259)
        throw validation_error("byte tasks require vocab_size >= 259");
    TokenSeq t;
    t.reserve(text.size() + 1);
    t.push_back(cfg.bos_id());
    for (unsigned char c : text) t.push_back(static_cast<Token>(c));
    return t;
}

Episode gen_icl_episode(const TaskSpec& spec, uint64_t seed, size_t index,
                        const ModelConfig& cfg) {
    CounterRng rng(sub_seed(spec.seed ^ seed, index));
    uint64_t c = 0;

    // 4 distinct symbols from a-z
    std::array<char, 4> sym{};
    size_t got = 0;
    while (got < 4) {
        const char s = static_cast<char>('a' + rng.below(c++, 26));
        bool dup = false;
        for (size_t i = 0; i < got; ++i) dup |= (sym[i] == s);
        if (!dup) sym[got++] = s;
    }
    // per-symbol labels, independent coin flips (the map is the episode's secret)
    std::array<char, 4> label{};
    for (size_t i = 0; i < 4; ++i) label[i] = static_cast<char>('0' + rng.below(c++, 2));

    // demonstrations cycle through seeded permutations, so k >= 4 shows every
    // symbol; the query is drawn from the demonstrated ones
    std::string text;
    std::vector<size_t> order;
    for (size_t j = 0; j < spec.k_shots; ++j) {
        if (j % 4 == 0) order = seeded_permutation(rng.bits(c++), 4);
        const size_t si = order[j % 4];
        text.push_back(sym[si]);
        text.push_back('>');
        text.push_back(label[si]);
        text.push_back(';');
    }
    const size_t qi = spec.k_shots >= 1
                          ? order[rng.below(c++, std::min<size_t>(spec.k_shots, 4))]
                          : rng.below(c++, 4);
    text.push_back(sym[qi]);
    text.push_back('>');

    Episode ep;
    ep.kind = TaskSpec::Kind::icl_mapping;
    ep.prompt = prompt_tokens(text, cfg);
    ep.gold = std::string(1, label[qi]);
    ep.max_new = 1;
    ep.full_text = text + ep.gold;
    if (ep.prompt.size() + ep.max_new > cfg.max_seq)
        throw validation_error("icl episode does not fit max_seq");
    return ep;
}

static std::string render_addition(int a, int b, int digits) {
    std::string s = std::to_string(a) + "+" + std::to_string(b) + "=:";
    const int u_sum = a % 10 + b % 10;
    const int u = u_sum % 10;
    const int c1 = u_sum / 10;
    if (digits == 2) {
        const int t = a / 10 + b / 10 + c1;
        s += " u " + std::to_string(u) + "; c " + std::to_string(c1) + "; t " +
             std::to_string(t) + "; answer " + std::to_string(a + b) + ";";
    } else {
        const int t_sum = (a / 10) % 10 + (b / 10) % 10 + c1;
        const int t = t_sum % 10;
        const int c2 = t_sum / 10;
        const int h = a / 100 + b / 100 + c2;
        s += " u " + std::to_string(u) + "; c " + std::to_string(c1) + "; t " +
             std::to_string(t) + "; c2 " + std::to_string(c2) + "; h " + std::to_string(h) +
             "; answer " + std::to_string(a + b) + ";";
    }
    return s;
}

Episode gen_cot_episode(const TaskSpec& spec, uint64_t seed, size_t index,
                        const ModelConfig& cfg) {
    if (spec.digits != 2 && spec.digits != 3)
        throw validation_error("cot_addition: digits must be 2 or 3");
    CounterRng rng(sub_seed(spec.seed ^ seed, index ^ 0x10000000ull));
    uint64_t c = 0;
    const int lo = spec.digits == 2 ? 10 : 100;
    const int hi = spec.digits == 2 ? 99 : 999;
    auto draw = [&]() { return lo + static_cast<int>(rng.below(c++, hi - lo + 1)); };

    std::string demos;
    for (size_t j = 0; j < spec.k_shots; ++j)
        demos += render_addition(draw(), draw(), spec.digits) + "\n";
    const int a = draw();
    const int b = draw();

    Episode ep;
    ep.kind = TaskSpec::Kind::cot_addition;
    ep.prompt = prompt_tokens(demos + std::to_string(a) + "+" + std::to_string(b) + "=:", cfg);
    ep.gold = std::to_string(a + b);
    ep.max_new = spec.digits == 2 ? 36 : 52;
    ep.full_text = demos + render_addition(a, b, spec.digits);
    if (ep.prompt.size() + ep.max_new > cfg.max_seq)
        throw validation_error("cot episode does not fit max_seq");
    return ep;
}

std::vector<Episode> gen_icl_task(const TaskSpec& spec, uint64_t seed, const ModelConfig& cfg) {
    if (spec.n_episodes < 1) throw validation_error("n_episodes must be >= 1");
    std::vector<Episode> eps;
    eps.reserve(spec.n_episodes);
    for (size_t i = 0; i < spec.n_episodes; ++i)
        eps.push_back(gen_icl_episode(spec, seed, i, cfg));
    return eps;
}

std::vector<Episode> gen_cot_task(const TaskSpec& spec, uint64_t seed, const ModelConfig& cfg) {
    if (spec.n_episodes < 1) throw validation_error("n_episodes must be >= 1");
    std::vector<Episode> eps;
    eps.reserve(spec.n_episodes);
    for (size_t i = 0; i < spec.n_episodes; ++i)
        eps.push_back(gen_cot_episode(spec, seed, i, cfg));
    return eps;
}

std::vector<Episode> gen_task(const TaskSpec& spec, uint64_t seed, const ModelConfig& cfg) {
    switch (spec.kind) {
        case TaskSpec::Kind::icl_mapping: return gen_icl_task(spec, seed, cfg);
        case TaskSpec::Kind::cot_addition: return gen_cot_task(spec, seed, cfg);
        case TaskSpec::Kind::lm_ppl:
            throw validation_error("lm_ppl is corpus-based, not episodic");
    }
    throw validation_error("bad task kind");
}

std::optional<long> parse_answer(const std::string& text) {
    const size_t pos = text.rfind("answer");
    if (pos == std::string::npos) return std::nullopt;
    size_t i = pos + 6;
    while (i < text.size() && (text[i] == ' ' || text[i] == ':')) ++i;
    if (i >= text.size() || text[i] < '0' || text[i] > '9') return std::nullopt;
    long v = 0;
    while (i < text.size() && text[i] >= '0' && text[i] <= '9') {
        v = v * 10 + (text[i] - '0');
        ++i;
    }
    return v;
}

bool episode_matches(const Episode& ep, const std::string& decoded) {
    if (ep.kind == TaskSpec::Kind::cot_addition) {
        const auto got = parse_answer(decoded);
        return got.has_value() && *got == std::stol(ep.gold);
    }
    return decoded == ep.gold;
}

std::string make_synthetic_corpus(size_t n_bytes, uint64_t seed) {
    static const char* kWords[] = {
        "the",  "of",    "and",  "to",   "in",   "is",   "was",  "for",  "on",    "as",
        "with", "his",   "they", "be",   "at",   "one",  "have", "this", "from",  "or",
        "had",  "by",    "hot",  "word", "but",  "what", "some", "we",   "can",   "out",
        "other", "were", "all",  "there", "when", "up",  "use",  "your", "how",   "said",
        "an",   "each",  "she",  "which", "do",  "their", "time", "if",
    };
    constexpr size_t kNumWords = sizeof(kWords) / sizeof(kWords[0]);
    constexpr size_t kSucc = 3;

    CounterRng rng(sub_seed(seed, "corpus"));
    // sparse successor table: each word transitions to one of 3 fixed others
    std::vector<std::array<size_t, kSucc>> succ(kNumWords);
    uint64_t c = 0;
    for (size_t i = 0; i < kNumWords; ++i)
        for (size_t j = 0; j < kSucc; ++j) succ[i][j] = rng.below(c++, kNumWords);

    std::string out;
    out.reserve(n_bytes + 16);
    while (out.size() < n_bytes) {
        size_t w = rng.below(c++, kNumWords);
        const size_t len = 6 + rng.below(c++, 7);
        for (size_t i = 0; i < len; ++i) {
            if (i > 0) out.push_back(' ');
            out += kWords[w];
            w = succ[w][rng.below(c++, kSucc)];
        }
        out += ". ";
    }
    out.resize(n_bytes);
    return out;
}

TokenSeq episode_training_sequence(const Episode& ep, const ModelConfig& cfg) {
    TokenSeq t;
    t.reserve(ep.full_text.size() + 2);
    t.push_back(cfg.bos_id());
    for (unsigned char ch : ep.full_text) t.push_back(static_cast<Token>(ch));
    t.push_back(cfg.eos_id());
    return t;
}

}  // namespace quantlab
