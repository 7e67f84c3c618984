#include "quantlab/runconfig.hpp"

#include <json.hpp>

#include "quantlab/checkpoint_io.hpp"

namespace quantlab {

using nlohmann::json;

namespace {

void expect_keys(const json& j, const std::string& where,
                 std::initializer_list<const char*> allowed) {
    if (!j.is_object())
        throw validation_error("config: '" + where + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok |= (key == a);
        if (!ok) throw validation_error("config: unknown key '" + where + "." + key + "'");
    }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_model(const json& j, ModelConfig& m) {
    expect_keys(j, "model",
                {"vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq",
                 "rope_base", "tie_embeddings", "norm_eps"});
    get_if(j, "vocab_size", m.vocab_size);
    get_if(j, "d_model", m.d_model);
    get_if(j, "n_layers", m.n_layers);
    get_if(j, "n_heads", m.n_heads);
    get_if(j, "d_ff", m.d_ff);
    get_if(j, "max_seq", m.max_seq);
    get_if(j, "rope_base", m.rope_base);
    get_if(j, "tie_embeddings", m.tie_embeddings);
    get_if(j, "norm_eps", m.norm_eps);
}

void parse_train(const json& j, const std::string& where, TrainSection& t) {
    expect_keys(j, where,
                {"lr", "beta1", "beta2", "adam_eps", "steps", "batch", "seq_len", "mixture",
                 "icl_shots", "cot_digits", "cot_shots"});
    get_if(j, "lr", t.hyper.lr);
    get_if(j, "beta1", t.hyper.beta1);
    get_if(j, "beta2", t.hyper.beta2);
    get_if(j, "adam_eps", t.hyper.adam_eps);
    get_if(j, "steps", t.hyper.steps);
    get_if(j, "batch", t.hyper.batch);
    get_if(j, "seq_len", t.hyper.seq_len);
    if (j.contains("mixture")) {
        const json& m = j.at("mixture");
        expect_keys(m, where + ".mixture", {"corpus", "icl", "cot"});
        get_if(m, "corpus", t.mix_corpus);
        get_if(m, "icl", t.mix_icl);
        get_if(m, "cot", t.mix_cot);
    }
    get_if(j, "icl_shots", t.icl_shots);
    get_if(j, "cot_digits", t.cot_digits);
    get_if(j, "cot_shots", t.cot_shots);
}

void parse_corpus(const json& j, const std::string& where, CorpusConfig& c) {
    expect_keys(j, where, {"kind", "path", "bytes"});
    get_if(j, "kind", c.kind);
    get_if(j, "path", c.path);
    get_if(j, "bytes", c.bytes);
    if (c.kind != "synthetic" && c.kind != "file")
        throw validation_error("config: corpus.kind must be 'synthetic' or 'file'");
    if (c.kind == "file" && c.path.empty())
        throw validation_error("config: corpus.kind 'file' requires corpus.path");
}

TaskSpec parse_task(const json& j, const std::string& where) {
    expect_keys(j, where,
                {"kind", "k_shots", "n_episodes", "digits", "seed", "seq_len", "stride"});
    if (!j.contains("kind"))
        throw validation_error("config: " + where + " needs a 'kind'");
    TaskSpec t;
    t.kind = task_kind_from_string(j.at("kind").get<std::string>());
    if (t.kind == TaskSpec::Kind::icl_mapping) t.n_episodes = 200;
    if (t.kind == TaskSpec::Kind::cot_addition) {
        t.n_episodes = 32;
        t.k_shots = 1;
    }
    get_if(j, "k_shots", t.k_shots);
    get_if(j, "n_episodes", t.n_episodes);
    get_if(j, "digits", t.digits);
    get_if(j, "seed", t.seed);
    get_if(j, "seq_len", t.seq_len);
    get_if(j, "stride", t.stride);
    return t;
}

json task_to_json(const TaskSpec& t) {
    json j{{"kind", to_string(t.kind)},
           {"k_shots", t.k_shots},
           {"n_episodes", t.n_episodes},
           {"digits", t.digits},
           {"seed", t.seed},
           {"seq_len", t.seq_len},
           {"stride", t.stride}};
    return j;
}

json train_to_json(const TrainSection& t) {
    return json{{"lr", t.hyper.lr},
                {"beta1", t.hyper.beta1},
                {"beta2", t.hyper.beta2},
                {"adam_eps", t.hyper.adam_eps},
                {"steps", t.hyper.steps},
                {"batch", t.hyper.batch},
                {"seq_len", t.hyper.seq_len},
                {"mixture",
                 json{{"corpus", t.mix_corpus}, {"icl", t.mix_icl}, {"cot", t.mix_cot}}},
                {"icl_shots", t.icl_shots},
                {"cot_digits", t.cot_digits},
                {"cot_shots", t.cot_shots}};
}

}  // namespace

std::string CorpusConfig::load(uint64_t seed) const {
    if (kind == "file") return read_file_bytes(path);
    return make_synthetic_corpus(bytes, seed);
}

RunConfig RunConfig::defaults() {
    RunConfig c;
    c.eval.tasks = {
        [] {
            TaskSpec t;
            t.kind = TaskSpec::Kind::lm_ppl;
            t.seq_len = 128;
            t.stride = 64;
            return t;
        }(),
        [] {
            TaskSpec t;
            t.kind = TaskSpec::Kind::icl_mapping;
            t.k_shots = 4;
            t.n_episodes = 200;
            return t;
        }(),
        [] {
            TaskSpec t;
            t.kind = TaskSpec::Kind::cot_addition;
            t.digits = 2;
            t.k_shots = 1;
            t.n_episodes = 32;
            return t;
        }(),
    };
    c.adapters.train.mix_corpus = 0.0;
    c.adapters.train.mix_icl = 1.0;
    c.adapters.train.mix_cot = 0.0;
    c.adapters.train.hyper.steps = 1000;
    return c;
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw validation_error(std::string("config: invalid JSON: ") + e.what());
    }
    expect_keys(j, "",
                {"seed", "output_dir", "threads", "model", "train", "quant", "sensitivity",
                 "adapters", "eval", "sweep"});
    RunConfig c = defaults();
    try {
        get_if(j, "seed", c.seed);
        get_if(j, "output_dir", c.output_dir);
        get_if(j, "threads", c.threads);
        if (j.contains("model")) parse_model(j.at("model"), c.model);
        if (j.contains("train")) parse_train(j.at("train"), "train", c.train);
        if (j.contains("quant")) {
            const json& q = j.at("quant");
            expect_keys(q, "quant",
                        {"algo", "bits", "group_size", "plan", "damp_frac",
                         "calib_sequences", "calib_seq_len"});
            get_if(q, "algo", c.quant.algo);
            get_if(q, "bits", c.quant.bits);
            get_if(q, "group_size", c.quant.group_size);
            get_if(q, "plan", c.quant.plan);
            get_if(q, "damp_frac", c.quant.damp_frac);
            get_if(q, "calib_sequences", c.quant.calib_sequences);
            get_if(q, "calib_seq_len", c.quant.calib_seq_len);
        }
        if (j.contains("sensitivity")) {
            const json& s = j.at("sensitivity");
            expect_keys(s, "sensitivity", {"tau", "mode", "top_n", "bits"});
            get_if(s, "tau", c.sensitivity.tau);
            get_if(s, "mode", c.sensitivity.mode);
            get_if(s, "top_n", c.sensitivity.top_n);
            get_if(s, "bits", c.sensitivity.bits);
        }
        if (j.contains("adapters")) {
            const json& a = j.at("adapters");
            expect_keys(a, "adapters", {"mode", "targets", "r", "alpha", "train"});
            get_if(a, "mode", c.adapters.mode);
            if (a.contains("targets"))
                c.adapters.targets = a.at("targets").get<std::vector<std::string>>();
            get_if(a, "r", c.adapters.r);
            get_if(a, "alpha", c.adapters.alpha);
            if (a.contains("train")) parse_train(a.at("train"), "adapters.train", c.adapters.train);
        }
        if (j.contains("eval")) {
            const json& e = j.at("eval");
            expect_keys(e, "eval", {"tasks", "corpus"});
            if (e.contains("tasks")) {
                c.eval.tasks.clear();
                size_t i = 0;
                for (const auto& tj : e.at("tasks"))
                    c.eval.tasks.push_back(
                        parse_task(tj, "eval.tasks[" + std::to_string(i++) + "]"));
            }
            if (e.contains("corpus")) parse_corpus(e.at("corpus"), "eval.corpus", c.eval.corpus);
        }
        if (j.contains("sweep")) {
            const json& s = j.at("sweep");
            expect_keys(s, "sweep", {"precisions", "plans"});
            if (s.contains("precisions"))
                c.sweep.precisions = s.at("precisions").get<std::vector<std::string>>();
            if (s.contains("plans"))
                c.sweep.plans = s.at("plans").get<std::vector<std::string>>();
        }
    } catch (const json::exception& e) {
        throw validation_error(std::string("config: type error: ") + e.what());
    }
    // surface obvious inconsistencies at load time, not mid-pipeline
    c.model.validate();
    algo_from_string(c.quant.algo);
    QuantParams{c.quant.bits, c.quant.group_size}.validate();
    outlier_mode_from_string(c.sensitivity.mode);
    if (c.adapters.mode != "pre" && c.adapters.mode != "post")
        throw validation_error("config: adapters.mode must be 'pre' or 'post'");
    for (const auto& t : c.adapters.targets) projection_type_from_string(t);
    return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
    return from_json_text(read_file_bytes(path));
}

std::string RunConfig::to_json_text() const {
    json tasks = json::array();
    for (const auto& t : eval.tasks) tasks.push_back(task_to_json(t));
    json j{
        {"seed", seed},
        {"output_dir", output_dir},
        {"threads", threads},
        {"model",
         json{{"vocab_size", model.vocab_size},
              {"d_model", model.d_model},
              {"n_layers", model.n_layers},
              {"n_heads", model.n_heads},
              {"d_ff", model.d_ff},
              {"max_seq", model.max_seq},
              {"rope_base", model.rope_base},
              {"tie_embeddings", model.tie_embeddings},
              {"norm_eps", model.norm_eps}}},
        {"train", train_to_json(train)},
        {"quant",
         json{{"algo", quant.algo},
              {"bits", quant.bits},
              {"group_size", quant.group_size},
              {"plan", quant.plan},
              {"damp_frac", quant.damp_frac},
              {"calib_sequences", quant.calib_sequences},
              {"calib_seq_len", quant.calib_seq_len}}},
        {"sensitivity",
         json{{"tau", sensitivity.tau},
              {"mode", sensitivity.mode},
              {"top_n", sensitivity.top_n},
              {"bits", sensitivity.bits}}},
        {"adapters",
         json{{"mode", adapters.mode},
              {"targets", adapters.targets},
              {"r", adapters.r},
              {"alpha", adapters.alpha},
              {"train", train_to_json(adapters.train)}}},
        {"eval",
         json{{"tasks", tasks},
              {"corpus",
               json{{"kind", eval.corpus.kind},
                    {"path", eval.corpus.path},
                    {"bytes", eval.corpus.bytes}}}}},
        {"sweep", json{{"precisions", sweep.precisions}, {"plans", sweep.plans}}},
    };
    return j.dump(2) + "\n";
}

}  // namespace quantlab
