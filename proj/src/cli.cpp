#include "quantlab/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "quantlab/checkpoint_io.hpp"
#include "quantlab/evalharness.hpp"
#include "quantlab/lora.hpp"
#include "quantlab/rng.hpp"
#include "quantlab/runconfig.hpp"
#include "quantlab/sensitivity.hpp"

namespace quantlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Collects artifacts in memory and lands them in one pass, so a command that
// fails mid-way leaves no partial outputs.
struct ArtifactWriter {
    fs::path dir;
    std::vector<std::pair<std::string, std::string>> files;  // name -> bytes

    explicit ArtifactWriter(const std::string& output_dir) : dir(output_dir) {}

    void add(const std::string& name, std::string bytes) {
        files.emplace_back(name, std::move(bytes));
    }

    void commit() {
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw io_error("cannot create output dir '" + dir.string() + "'");
        json manifest = json::array();
        std::sort(files.begin(), files.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        for (const auto& [name, bytes] : files) {
            write_file_bytes((dir / name).string(), bytes);
            char hex[17];
            std::snprintf(hex, sizeof(hex), "%016llx",
                          static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
            manifest.push_back(
                json{{"name", name}, {"bytes", bytes.size()}, {"fnv64", hex}});
        }
        write_file_bytes((dir / "manifest.json").string(),
                         json{{"artifacts", manifest}}.dump(2) + "\n");
    }
};

struct Overrides {
    std::optional<uint64_t> seed;
    std::optional<std::string> output;
    std::optional<int> threads;
    std::optional<int> bits;
    std::optional<std::string> plan;
    std::optional<std::string> algo;
    std::optional<size_t> steps;
    std::optional<std::string> corpus;
    std::optional<std::string> mode;
};

RunConfig resolve_config(const std::string& config_path, const Overrides& ov) {
    RunConfig cfg =
        config_path.empty() ? RunConfig::defaults() : RunConfig::from_file(config_path);
    if (ov.seed) cfg.seed = *ov.seed;
    if (ov.output) cfg.output_dir = *ov.output;
    if (ov.threads) cfg.threads = *ov.threads;
    if (ov.bits) {
        cfg.quant.bits = *ov.bits;
        QuantParams{cfg.quant.bits, cfg.quant.group_size}.validate();
    }
    if (ov.plan) cfg.quant.plan = *ov.plan;
    if (ov.algo) {
        cfg.quant.algo = *ov.algo;
        algo_from_string(cfg.quant.algo);
    }
    if (ov.steps) {
        cfg.train.hyper.steps = *ov.steps;
        cfg.adapters.train.hyper.steps = *ov.steps;
    }
    if (ov.corpus) {
        cfg.eval.corpus.kind = "file";
        cfg.eval.corpus.path = *ov.corpus;
    }
    if (ov.mode) {
        cfg.adapters.mode = *ov.mode;
        if (*ov.mode != "pre" && *ov.mode != "post")
            throw validation_error("--mode must be 'pre' or 'post'");
    }
    int threads = cfg.threads;
    if (threads == 0) {
        if (const char* env = std::getenv("QUANTLAB_THREADS")) threads = std::atoi(env);
        if (threads <= 0) threads = 1;
    }
    set_thread_count(threads);
    return cfg;
}

std::shared_ptr<MixtureStream> build_stream(const RunConfig& cfg, const TrainSection& ts,
                                            const std::string& corpus, const char* salt) {
    std::vector<MixtureStream::Part> parts;
    if (ts.mix_corpus > 0.0)
        parts.push_back({std::make_shared<CorpusWindowStream>(
                             corpus, ts.hyper.seq_len,
                             sub_seed(cfg.seed, std::string(salt) + ".corpus")),
                         ts.mix_corpus});
    if (ts.mix_icl > 0.0) {
        TaskSpec spec;
        spec.kind = TaskSpec::Kind::icl_mapping;
        spec.k_shots = ts.icl_shots;
        parts.push_back({std::make_shared<EpisodeStream>(
                             spec, cfg.model, sub_seed(cfg.seed, std::string(salt) + ".icl")),
                         ts.mix_icl});
    }
    if (ts.mix_cot > 0.0) {
        TaskSpec spec;
        spec.kind = TaskSpec::Kind::cot_addition;
        spec.digits = ts.cot_digits;
        spec.k_shots = ts.cot_shots;
        parts.push_back({std::make_shared<EpisodeStream>(
                             spec, cfg.model, sub_seed(cfg.seed, std::string(salt) + ".cot")),
                         ts.mix_cot});
    }
    return std::make_shared<MixtureStream>(std::move(parts),
                                           sub_seed(cfg.seed, std::string(salt) + ".mix"));
}

std::string loss_curve_csv(const std::vector<double>& curve) {
    std::string out = "step,loss\n";
    for (size_t i = 0; i < curve.size(); ++i)
        out += std::to_string(i) + "," + format_double(curve[i]) + "\n";
    return out;
}

std::string error_report_json(const ErrorReport& report) {
    json tensors = json::object();
    for (const auto& [name, row] : report.rows)
        tensors[name] = json{{"type", to_string(row.type)},
                             {"bits", row.bits},
                             {"group_size", row.group_size},
                             {"rel_recon_error", row.rel_recon_error}};
    json per_type = json::object();
    for (const auto& [t, v] : report.per_type_mean) per_type[to_string(t)] = v;
    return json{{"tensors", tensors}, {"per_type_mean", per_type}}.dump(2) + "\n";
}

// Shared by quantize/analyze/sweep: calibration token sequences.
std::vector<TokenSeq> calibration_for(const RunConfig& cfg, const std::string& corpus) {
    return sample_calibration(corpus, cfg.quant.calib_sequences, cfg.quant.calib_seq_len,
                              sub_seed(cfg.seed, "calib"));
}

QuantPlan plan_for(const RunConfig& cfg, const ModelCheckpoint& model,
                   const std::vector<TokenSeq>& calib) {
    if (cfg.quant.plan == "!crucial") {
        // rank types by a quantize-all pass first, then preserve the
        // crucial set (down + top-2 attention types)
        const QuantPlan all = parse_plan("all", cfg.quant.bits, cfg.quant.group_size);
        const auto [qm, report] =
            quantize_model(model, all, calib, algo_from_string(cfg.quant.algo),
                           cfg.quant.damp_frac);
        return make_crucial_plan(report, cfg.quant.bits, cfg.quant.group_size);
    }
    return parse_plan(cfg.quant.plan, cfg.quant.bits, cfg.quant.group_size);
}

int cmd_train(const RunConfig& cfg) {
    const std::string corpus = cfg.eval.corpus.load(sub_seed(cfg.seed, "corpus"));
    ModelCheckpoint model = init_model(cfg.model, sub_seed(cfg.seed, "init"));
    auto stream = build_stream(cfg, cfg.train, corpus, "train");
    TrainHyper hyper = cfg.train.hyper;
    hyper.seed = sub_seed(cfg.seed, "train");
    const TrainResult tr = train(model, *stream, hyper);

    ArtifactWriter out(cfg.output_dir);
    out.add("config.json", cfg.to_json_text());
    out.add("loss_curve.csv", loss_curve_csv(tr.loss_curve));
    {
        const fs::path tmp = fs::temp_directory_path() / "quantlab_ckpt.tmp";
        write_qlab(tmp.string(), model);
        out.add("checkpoint.qlab", read_file_bytes(tmp.string()));
        fs::remove(tmp);
    }
    out.commit();
    std::cerr << "trained " << cfg.train.hyper.steps << " steps; final loss "
              << tr.loss_curve.back() << "\n";
    return 0;
}

int cmd_quantize(const RunConfig& cfg, const std::string& ckpt_path) {
    const ModelCheckpoint model = read_checkpoint(ckpt_path);
    const std::string corpus = cfg.eval.corpus.load(sub_seed(cfg.seed, "corpus"));
    const auto calib = calibration_for(cfg, corpus);
    const QuantPlan plan = plan_for(cfg, model, calib);
    const auto [qm, report] = quantize_model(model, plan, calib,
                                             algo_from_string(cfg.quant.algo),
                                             cfg.quant.damp_frac);

    ArtifactWriter out(cfg.output_dir);
    out.add("config.json", cfg.to_json_text());
    out.add("error_report.json", error_report_json(report));
    {
        const fs::path tmp = fs::temp_directory_path() / "quantlab_q.tmp";
        write_qlab(tmp.string(), qm);
        out.add("quantized.qlab", read_file_bytes(tmp.string()));
        fs::remove(tmp);
    }
    out.commit();
    return 0;
}

int cmd_analyze(const RunConfig& cfg, const std::string& ckpt_path) {
    const ModelCheckpoint model = read_checkpoint(ckpt_path);
    const std::string corpus = cfg.eval.corpus.load(sub_seed(cfg.seed, "corpus"));
    const auto probe = calibration_for(cfg, corpus);
    const ModelView view = make_view(model);
    const OutlierReport outliers = detect_outliers(
        view, probe, cfg.sensitivity.tau, outlier_mode_from_string(cfg.sensitivity.mode));

    const QuantPlan all = parse_plan("all", cfg.sensitivity.bits, cfg.quant.group_size);
    const auto [qm, report] = quantize_model(model, all, probe,
                                             algo_from_string(cfg.quant.algo),
                                             cfg.quant.damp_frac);
    const CrucialRanking ranking = rank_crucial(report, cfg.sensitivity.top_n);

    json oj;
    oj["threshold"] = outliers.threshold;
    oj["mode"] = cfg.sensitivity.mode;
    oj["feature_span"] = outliers.feature_span;
    json dims = json::array();
    std::string csv = "dim,layers_affected,global_max_abs\n";
    for (const auto& rec : outliers.ranked) {
        dims.push_back(json{{"dim", rec.dim},
                            {"layers_affected", rec.layers_affected},
                            {"global_max_abs", rec.global_max_abs},
                            {"per_layer_max_abs", rec.per_layer_max_abs}});
        csv += std::to_string(rec.dim) + "," + std::to_string(rec.layers_affected) + "," +
               format_double(rec.global_max_abs) + "\n";
    }
    oj["dims"] = dims;

    json cj;
    json means = json::object();
    for (const auto& [t, v] : ranking.mean_error) means[to_string(t)] = v;
    cj["mean_error"] = means;
    json ordered = json::array(), top = json::array();
    for (ProjectionType t : ranking.ordered) ordered.push_back(to_string(t));
    for (ProjectionType t : ranking.top) top.push_back(to_string(t));
    cj["ordered"] = ordered;
    cj["top"] = top;

    ArtifactWriter out(cfg.output_dir);
    out.add("config.json", cfg.to_json_text());
    out.add("outliers.json", oj.dump(2) + "\n");
    out.add("outliers.csv", csv);
    out.add("crucial.json", cj.dump(2) + "\n");
    out.add("error_report.json", error_report_json(report));
    out.commit();
    return 0;
}

int cmd_finetune(const RunConfig& cfg, const std::string& base_path) {
    const std::string corpus = cfg.eval.corpus.load(sub_seed(cfg.seed, "corpus"));
    std::set<ProjectionType> targets;
    for (const auto& t : cfg.adapters.targets)
        targets.insert(projection_type_from_string(t));
    auto stream = build_stream(cfg, cfg.adapters.train, corpus, "finetune");
    TrainHyper hyper = cfg.adapters.train.hyper;
    hyper.seed = sub_seed(cfg.seed, "finetune");

    ArtifactWriter out(cfg.output_dir);
    out.add("config.json", cfg.to_json_text());

    const std::string base_hash_before = file_hash(base_path);
    AdapterTrainResult result;
    if (cfg.adapters.mode == "pre") {
        const ModelCheckpoint base = read_checkpoint(base_path);
        AdapterSet aset =
            attach(base, targets, cfg.adapters.r, cfg.adapters.alpha,
                   sub_seed(cfg.seed, "lora"));
        result = train_adapters(aset, *stream, hyper);
        const ModelCheckpoint merged = merge_adapters(aset);
        const fs::path tmp = fs::temp_directory_path() / "quantlab_m.tmp";
        write_qlab(tmp.string(), merged);
        out.add("merged.qlab", read_file_bytes(tmp.string()));
        fs::remove(tmp);
    } else {
        const QuantizedModel base = read_qlab(base_path);
        AdapterSet aset =
            attach(base, targets, cfg.adapters.r, cfg.adapters.alpha,
                   sub_seed(cfg.seed, "lora"));
        result = train_adapters(aset, *stream, hyper);
        const fs::path tmp = fs::temp_directory_path() / "quantlab_a.tmp";
        write_adapters(tmp.string(), aset, base_hash_before);
        out.add("adapters.qlab", read_file_bytes(tmp.string()));
        fs::remove(tmp);
    }
    if (file_hash(base_path) != base_hash_before)
        throw io_error("base model file changed during fine-tuning");

    out.add("adapter_loss_curve.csv", loss_curve_csv(result.loss_curve));
    out.add("finetune.json",
            json{{"mode", cfg.adapters.mode},
                 {"trainable_params", result.trainable_params},
                 {"optimizer_state_bytes", result.optimizer_state_bytes},
                 {"base_hash", base_hash_before}}
                    .dump(2) +
                "\n");
    out.commit();
    return 0;
}

json eval_rows_json(const std::vector<SweepRow>& rows) {
    json out = json::array();
    for (const auto& r : rows)
        out.push_back(json{{"model", r.precision},
                           {"task", r.task},
                           {"metric_name", r.metric_name},
                           {"metric_value", r.metric_value},
                           {"total_bits", r.total_bits},
                           {"memory_bytes", r.memory_bytes}});
    return out;
}

int cmd_eval(const RunConfig& cfg, const std::vector<std::string>& model_paths) {
    if (model_paths.empty()) throw validation_error("eval: no model files given");
    const std::string corpus = cfg.eval.corpus.load(sub_seed(cfg.seed, "corpus"));
    std::vector<SweepRow> rows;
    for (const auto& path : model_paths) {
        const QuantizedModel qm = read_qlab(path);
        const ModelView view = make_view(qm);
        const BitsReport br = total_bits(qm);
        for (const auto& task : cfg.eval.tasks) {
            SweepRow row;
            row.precision = fs::path(path).filename().string();
            row.plan = "-";
            row.task = to_string(task.kind);
            row.metric_name = task.metric_name();
            if (task.kind == TaskSpec::Kind::lm_ppl) {
                row.metric_value = perplexity(view, corpus, task.seq_len, task.stride);
            } else {
                const auto episodes =
                    gen_task(task, sub_seed(cfg.seed, "eval"), view.config);
                row.metric_value = accuracy(view, episodes).accuracy;
            }
            row.total_bits = br.total_bits;
            row.memory_bytes = br.memory_bytes;
            rows.push_back(std::move(row));
        }
    }
    std::string csv = "model,task,metric_name,metric_value,total_bits,memory_bytes\n";
    for (const auto& r : rows)
        csv += r.precision + "," + r.task + "," + r.metric_name + "," +
               format_double(r.metric_value) + "," + std::to_string(r.total_bits) + "," +
               std::to_string(r.memory_bytes) + "\n";

    ArtifactWriter out(cfg.output_dir);
    out.add("config.json", cfg.to_json_text());
    out.add("eval.csv", csv);
    out.add("eval.json", json{{"rows", eval_rows_json(rows)}}.dump(2) + "\n");
    out.commit();
    return 0;
}

int cmd_sweep(const RunConfig& cfg, const std::string& ckpt_path) {
    const ModelCheckpoint model = read_checkpoint(ckpt_path);
    const std::string corpus = cfg.eval.corpus.load(sub_seed(cfg.seed, "corpus"));
    const auto calib = calibration_for(cfg, corpus);
    SweepSettings settings;
    settings.precisions = cfg.sweep.precisions;
    settings.plans = cfg.sweep.plans;
    settings.group_size = cfg.quant.group_size;
    settings.algo = algo_from_string(cfg.quant.algo);
    settings.damp_frac = cfg.quant.damp_frac;
    const SweepResult result =
        run_sweep(model, settings, cfg.eval.tasks, calib, corpus, sub_seed(cfg.seed, "eval"));
    for (const auto& e : result.cell_errors) std::cerr << "cell failed: " << e << "\n";
    for (const auto& r : result.rows)
        std::cerr << r.precision << "/" << r.plan << "/" << r.task << ": "
                  << format_double(r.metric_value) << " (" << r.wall_time_sec << "s)\n";

    ArtifactWriter out(cfg.output_dir);
    out.add("config.json", cfg.to_json_text());
    out.add("sweep.csv", sweep_csv(result));
    out.add("sweep.json", sweep_json(result));
    for (const auto& task : cfg.eval.tasks)
        out.add(std::string("plot_") + to_string(task.kind) + ".txt",
                sweep_plot_data(result, to_string(task.kind)));
    out.commit();
    return 0;
}

int cmd_report(const RunConfig& cfg) {
    const fs::path dir(cfg.output_dir);
    if (!fs::exists(dir / "manifest.json"))
        throw io_error("no manifest.json under '" + cfg.output_dir + "'");
    std::string text = "run report: " + cfg.output_dir + "\n";
    const json manifest = json::parse(read_file_bytes((dir / "manifest.json").string()));
    text += "artifacts:\n";
    for (const auto& a : manifest.at("artifacts"))
        text += "  " + a.at("name").get<std::string>() + "  (" +
                std::to_string(a.at("bytes").get<size_t>()) + " bytes, fnv64 " +
                a.at("fnv64").get<std::string>() + ")\n";
    auto maybe_dump_csv = [&](const char* name) {
        if (fs::exists(dir / name)) {
            text += "\n";
            text += name;
            text += ":\n";
            text += read_file_bytes((dir / name).string());
        }
    };
    maybe_dump_csv("sweep.csv");
    maybe_dump_csv("eval.csv");
    maybe_dump_csv("sensitivity.csv");
    if (fs::exists(dir / "error_report.json")) {
        const json er = json::parse(read_file_bytes((dir / "error_report.json").string()));
        text += "\nper-type mean relative reconstruction error:\n";
        for (const auto& [k, v] : er.at("per_type_mean").items())
            text += "  " + k + ": " + format_double(v.get<double>()) + "\n";
    }
    text += "\nnote: judge-scored instruction following is not measured at desk scale\n";
    write_file_bytes((dir / "report.txt").string(), text);
    std::cout << text;
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"quantlab: quantization laboratory for a tiny decoder LM"};
    app.require_subcommand(1);

    std::string config_path;
    Overrides ov;
    app.add_option("--config", config_path, "JSON run configuration");
    app.add_option("--seed", ov.seed, "override seed");
    app.add_option("--output", ov.output, "override output_dir");
    app.add_option("--threads", ov.threads, "worker threads (results are thread-invariant)");
    app.add_option("--bits", ov.bits, "override quant.bits");
    app.add_option("--plan", ov.plan, "override quant.plan (all, !att, !ffn, !crucial)");
    app.add_option("--algo", ov.algo, "override quant.algo (rtn, gptq)");
    app.add_option("--steps", ov.steps, "override training steps");
    app.add_option("--corpus", ov.corpus, "override corpus file path");
    app.add_option("--mode", ov.mode, "finetune mode (pre, post)");

    auto* train_cmd = app.add_subcommand("train", "train a model from scratch");
    auto* quant_cmd = app.add_subcommand("quantize", "quantize a checkpoint");
    auto* analyze_cmd = app.add_subcommand("analyze", "outlier + crucial-weight analysis");
    auto* finetune_cmd = app.add_subcommand("finetune", "adapter fine-tuning (pre/post)");
    auto* eval_cmd = app.add_subcommand("eval", "evaluate model files");
    auto* sweep_cmd = app.add_subcommand("sweep", "bit-width x plan x task sweep");
    auto* report_cmd = app.add_subcommand("report", "summarize an output directory");
    for (auto* sub : {train_cmd, quant_cmd, analyze_cmd, finetune_cmd, eval_cmd, sweep_cmd,
                      report_cmd})
        sub->fallthrough();

    std::string model_arg;
    std::vector<std::string> model_args;
    quant_cmd->add_option("checkpoint", model_arg, "f32 checkpoint file")->required();
    analyze_cmd->add_option("checkpoint", model_arg, "f32 checkpoint file")->required();
    finetune_cmd->add_option("base", model_arg, "base model file")->required();
    sweep_cmd->add_option("checkpoint", model_arg, "f32 checkpoint file")->required();
    eval_cmd->add_option("models", model_args, "model files")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << e.what() << "\n";
        return 1;
    }

    try {
        const RunConfig cfg = resolve_config(config_path, ov);
        if (train_cmd->parsed()) return cmd_train(cfg);
        if (quant_cmd->parsed()) return cmd_quantize(cfg, model_arg);
        if (analyze_cmd->parsed()) return cmd_analyze(cfg, model_arg);
        if (finetune_cmd->parsed()) return cmd_finetune(cfg, model_arg);
        if (eval_cmd->parsed()) return cmd_eval(cfg, model_args);
        if (sweep_cmd->parsed()) return cmd_sweep(cfg, model_arg);
        if (report_cmd->parsed()) return cmd_report(cfg);
        throw validation_error("no subcommand");
    } catch (const validation_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const numerical_error& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 2;
    } catch (const io_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace quantlab
