#include "sundial/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "sundial/backbone.hpp"
#include "sundial/checkpoint.hpp"
#include "sundial/data.hpp"
#include "sundial/error.hpp"
#include "sundial/eval.hpp"
#include "sundial/instrumentation.hpp"
#include "sundial/timeflow.hpp"
#include "sundial/train.hpp"

namespace sundial {

namespace {

using nlohmann::json;

std::string file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checksum: cannot open " + path);
    std::uint64_t h = 14695981039346656037ull;
    char buf[1 << 14];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
        if (!in) break;
    }
    char hex[32];
    std::snprintf(hex, sizeof(hex), "fnv1a64:%016llx", static_cast<unsigned long long>(h));
    return hex;
}

std::string fmt9(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

// run metadata written next to each command's primary artifact
class Manifest {
  public:
    Manifest(std::string command, std::uint64_t seed) : start_(std::chrono::steady_clock::now()) {
        j_["command"] = std::move(command);
        j_["seed"] = seed;
        j_["parameters"] = json::object();
        j_["inputs"] = json::object();
        j_["outputs"] = json::object();
    }
    json& parameters() { return j_["parameters"]; }
    void input(const std::string& label, const std::string& path) { j_["inputs"][label] = path; }
    void output(const std::string& label, const std::string& path) {
        j_["outputs"][label] = path;
        artifact_paths_.push_back(path);
    }
    void write(const std::string& explicit_path, const std::string& fallback) {
        auto path = explicit_path.empty() ? fallback : explicit_path;
        std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start_;
        j_["wall_clock_seconds"] = elapsed.count();
        json sums = json::object();
        for (const auto& p : artifact_paths_) sums[p] = file_checksum(p);
        j_["checksums"] = std::move(sums);
        std::ofstream out(path);
        if (!out) throw DataError("cannot write manifest: " + path);
        out << j_.dump(2) << "\n";
    }

  private:
    json j_;
    std::vector<std::string> artifact_paths_;
    std::chrono::steady_clock::time_point start_;
};

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<double> parse_levels(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            std::size_t used = 0;
            double v = std::stod(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError("invalid quantile level '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError("no quantile levels given");
    return out;
}

std::vector<std::string> parse_metric_list(const std::string& csv) {
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    if (out.empty()) throw ConfigError("no metrics given");
    return out;
}

ModelConfig resolve_config(const std::string& config_path, const std::string& preset,
                           HeadKind* head) {
    if (!config_path.empty()) return config_from_json_text(read_file(config_path), head);
    return preset_config(preset);
}

json config_json(const ModelConfig& cfg, HeadKind head) {
    return json::parse(config_to_json_text(cfg, head));
}

json train_json(const TrainConfig& t) {
    json j;
    j["batch_size"] = t.batch_size;
    j["steps"] = t.steps;
    j["lr_peak"] = t.lr_peak;
    j["warmup_steps"] = t.warmup_steps;
    j["weight_decay"] = t.weight_decay;
    j["grad_clip_norm"] = t.grad_clip_norm;
    j["min_context"] = t.min_context;
    j["max_context"] = t.max_context;
    j["objective"] = head_kind_name(t.objective);
    j["seed"] = t.seed;
    return j;
}

struct TrainFlags {
    std::int64_t batch_size = 8;
    double lr = -1;
    std::int64_t warmup = -1;
    double weight_decay = 0.01;
    double clip = 1.0;
    std::int64_t min_context = -1;
    std::int64_t max_context = -1;

    void attach(CLI::App* cmd) {
        cmd->add_option("--batch-size", batch_size, "windows per step")->capture_default_str();
        cmd->add_option("--lr", lr, "peak learning rate");
        cmd->add_option("--warmup", warmup, "warmup steps (default steps/10)");
        cmd->add_option("--weight-decay", weight_decay, "decoupled weight decay")
            ->capture_default_str();
        cmd->add_option("--clip", clip, "gradient clip norm")->capture_default_str();
        cmd->add_option("--min-context", min_context, "shortest window in points");
        cmd->add_option("--max-context", max_context, "longest window in points");
    }

    TrainConfig resolve(const ModelConfig& mcfg, std::int64_t steps, HeadKind objective,
                        std::uint64_t seed, double default_lr) const {
        TrainConfig t;
        t.batch_size = batch_size;
        t.steps = steps;
        t.lr_peak = lr >= 0 ? lr : default_lr;
        t.warmup_steps = warmup >= 0 ? warmup : std::max<std::int64_t>(1, steps / 10);
        t.weight_decay = weight_decay;
        t.grad_clip_norm = clip;
        t.min_context = min_context >= 0 ? min_context : mcfg.patch_len + mcfg.horizon;
        t.max_context =
            max_context >= 0 ? max_context : std::min<std::int64_t>(mcfg.max_context, 512);
        t.objective = objective;
        t.seed = seed;
        return t;
    }
};

void print_train_progress(const TrainResult& res, std::int64_t steps) {
    std::int64_t stride = std::max<std::int64_t>(1, steps / 10);
    for (const auto& r : res.records)
        if (r.step % stride == 0 || r.step == steps - 1)
            std::cout << "step " << r.step << " loss " << fmt9(r.loss) << " lr " << fmt9(r.lr)
                      << " grad_norm " << fmt9(r.grad_norm) << "\n";
}

// ---- subcommand runners ----

struct SynthArgs {
    std::uint64_t seed = 0;
    std::int64_t count = 0;
    std::int64_t length = 0;
    int max_kernels = 5;
    std::string out, manifest;
};

int run_synth(const SynthArgs& a) {
    Manifest man("synth", a.seed);
    man.parameters() = {{"count", a.count}, {"length", a.length}, {"max_kernels", a.max_kernels}};
    auto corpus = make_synth_corpus(a.seed, a.count, a.length, a.max_kernels);
    save_corpus(corpus, a.out);
    man.output("corpus", a.out);
    man.write(a.manifest, a.out + ".manifest.json");
    std::cout << "wrote " << corpus.size() << " series to " << a.out << "\n";
    return 0;
}

struct TrainArgs {
    std::string corpus, config, preset = "toy", objective = "timeflow";
    bool objective_given = false;
    std::int64_t steps = 1000;
    std::string out_checkpoint, loss_log, emit_curves, manifest;
    std::uint64_t seed = 0;
    TrainFlags flags;
};

int run_train(const TrainArgs& a) {
    Manifest man("train", a.seed);
    auto corpus = load_corpus(a.corpus);
    man.input("corpus", a.corpus);
    // precedence: explicit --objective > config file head > timeflow default
    HeadKind head = head_kind_from_name(a.objective);
    HeadKind file_head = head;
    auto cfg = resolve_config(a.config, a.preset, &file_head);
    if (!a.objective_given) head = file_head;
    auto tcfg = a.flags.resolve(cfg, a.steps, head, a.seed, 1e-3);
    man.parameters()["model"] = config_json(cfg, head);
    man.parameters()["train"] = train_json(tcfg);

    auto model = init_model(cfg, head, a.seed);
    auto result = train_model(model, corpus, tcfg);
    print_train_progress(result, tcfg.steps);

    save_checkpoint(model, a.out_checkpoint);
    man.output("checkpoint", a.out_checkpoint);
    if (!a.loss_log.empty()) {
        write_loss_log(result.records, a.loss_log);
        man.output("loss_log", a.loss_log);
    }
    if (!a.emit_curves.empty() && a.emit_curves != a.loss_log) {
        write_loss_log(result.records, a.emit_curves);
        man.output("curves", a.emit_curves);
    }
    man.write(a.manifest, a.out_checkpoint + ".manifest.json");
    return 0;
}

struct FinetuneArgs {
    std::string checkpoint, corpus, config, preset;
    std::int64_t steps = 500;
    std::string out_checkpoint, loss_log, manifest;
    std::uint64_t seed = 0;
    TrainFlags flags;
};

int run_finetune(const FinetuneArgs& a) {
    Manifest man("finetune", a.seed);
    auto model = load_checkpoint(a.checkpoint);
    man.input("checkpoint", a.checkpoint);
    auto corpus = load_corpus(a.corpus);
    man.input("corpus", a.corpus);
    if (!a.config.empty() || !a.preset.empty()) {
        HeadKind expect_head = model.head;
        auto expect = a.config.empty() ? preset_config(a.preset)
                                       : config_from_json_text(read_file(a.config), &expect_head);
        require_same_architecture(model.cfg, model.head, expect, expect_head);
    }
    auto tcfg = a.flags.resolve(model.cfg, a.steps, model.head, a.seed, 1e-4);
    man.parameters()["model"] = config_json(model.cfg, model.head);
    man.parameters()["train"] = train_json(tcfg);

    auto result = fine_tune(model, corpus, tcfg);
    print_train_progress(result, tcfg.steps);

    save_checkpoint(model, a.out_checkpoint);
    man.output("checkpoint", a.out_checkpoint);
    if (!a.loss_log.empty()) {
        write_loss_log(result.records, a.loss_log);
        man.output("loss_log", a.loss_log);
    }
    man.write(a.manifest, a.out_checkpoint + ".manifest.json");
    return 0;
}

struct ForecastArgs {
    std::string checkpoint, context_file;
    std::int64_t horizon = 0;
    std::int64_t samples = 20;
    std::int64_t steps = 50;
    std::string levels = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";
    std::uint64_t seed = 0;
    std::string out, manifest;
};

int run_forecast(const ForecastArgs& a) {
    Manifest man("forecast", a.seed);
    auto model = load_checkpoint(a.checkpoint);
    man.input("checkpoint", a.checkpoint);
    auto contexts = load_corpus(a.context_file);
    man.input("context_file", a.context_file);
    if (contexts.empty()) throw DataError("forecast: context file holds no series");
    auto levels = parse_levels(a.levels);
    man.parameters() = {{"horizon", a.horizon}, {"samples", a.samples},
                        {"steps", a.steps},     {"levels", levels},
                        {"model", config_json(model.cfg, model.head)}};

    // build every row before opening the output so errors leave no file
    std::string body;
    Rng seed_root(a.seed);
    for (std::size_t i = 0; i < contexts.size(); ++i) {
        const auto& rec = contexts[i];
        std::vector<double> ctx(rec.values.begin(), rec.values.end());
        auto series_seed = seed_root.split(static_cast<std::uint64_t>(i) + 1).next_u64();
        auto ens = rolling_forecast(model, ctx, a.horizon, a.samples, a.steps, levels,
                                    series_seed);
        for (std::int64_t t = 0; t < a.horizon; ++t) {
            auto ti = static_cast<std::size_t>(t);
            body += rec.id + "," + std::to_string(t + 1) + "," + fmt9(ens.mean[ti]);
            for (const auto& q : ens.quantiles) body += "," + fmt9(q[ti]);
            body += "," + fmt9(ens.median[ti]) + "\n";
        }
    }

    std::ofstream out(a.out);
    if (!out) throw DataError("cannot open forecast output: " + a.out);
    out << "id,step,mean";
    for (double l : levels) {
        char buf[24];
        std::snprintf(buf, sizeof(buf), ",q%g", l);
        out << buf;
    }
    out << ",median\n" << body;
    out.close();
    man.output("forecast", a.out);
    man.write(a.manifest, a.out + ".manifest.json");
    std::cout << "forecast " << contexts.size() << " series, horizon " << a.horizon << " -> "
              << a.out << "\n";
    return 0;
}

struct EvaluateArgs {
    std::string checkpoint, corpus;
    std::int64_t horizon = 32;
    std::int64_t samples = 20;
    std::int64_t steps = 50;
    std::string metrics = "mse,mae,mase,wql,crps";
    std::string levels = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";
    std::uint64_t seed = 0;
    std::string out, manifest;
};

int run_evaluate(const EvaluateArgs& a) {
    Manifest man("evaluate", a.seed);
    auto model = load_checkpoint(a.checkpoint);
    man.input("checkpoint", a.checkpoint);
    auto corpus = load_corpus(a.corpus);
    man.input("corpus", a.corpus);
    EvalOptions opts;
    opts.horizon = a.horizon;
    opts.n_samples = a.samples;
    opts.steps = a.steps;
    opts.levels = parse_levels(a.levels);
    opts.metrics = parse_metric_list(a.metrics);
    opts.seed = a.seed;
    man.parameters() = {{"horizon", opts.horizon}, {"samples", opts.n_samples},
                        {"steps", opts.steps},     {"levels", opts.levels},
                        {"metrics", opts.metrics}, {"model", config_json(model.cfg, model.head)}};

    auto rows = evaluate_model(model, corpus, opts);
    write_report(rows, a.out);
    man.output("report", a.out);
    man.write(a.manifest, a.out + ".manifest.json");
    for (const auto& r : rows)
        if (r.id == "aggregate") std::cout << r.metric << " " << fmt9(r.value) << "\n";
    return 0;
}

struct GradcheckArgs {
    bool config_tiny = true;
    std::int64_t params = 200;
    double tolerance = 1e-3;
    std::uint64_t seed = 0;
    std::string out, manifest;
};

int run_gradcheck(const GradcheckArgs& a) {
    Manifest man("gradcheck", a.seed);
    auto cfg = preset_config("tiny");
    man.parameters() = {{"params", a.params},
                        {"tolerance", a.tolerance},
                        {"model", config_json(cfg, HeadKind::timeflow)}};
    auto model = init_model(cfg, HeadKind::timeflow, a.seed);
    auto corpus = make_synth_corpus(a.seed + 1, 4, 48, 3);
    TrainConfig tcfg;
    tcfg.batch_size = 4;
    tcfg.min_context = cfg.patch_len + cfg.horizon;
    tcfg.max_context = std::min<std::int64_t>(cfg.max_context, 48);
    tcfg.seed = a.seed;
    Rng rng(a.seed + 2);
    auto batch = make_batch(corpus, cfg, tcfg, rng);
    auto report = grad_check(model, batch, a.params, a.tolerance, a.seed + 3);

    std::string line = std::string("gradcheck ") + (report.pass ? "PASS" : "FAIL") +
                       ": max_rel_err " + fmt9(report.max_rel_err) + " over " +
                       std::to_string(report.n_checked) + " sampled parameters (worst " +
                       report.worst_param + ", tolerance " + fmt9(a.tolerance) + ")";
    std::cout << line << "\n";
    if (!a.out.empty()) {
        std::ofstream out(a.out);
        if (!out) throw DataError("cannot open report: " + a.out);
        out << line << "\n";
        man.output("report", a.out);
    }
    man.write(a.manifest, a.out.empty() ? "gradcheck.manifest.json" : a.out + ".manifest.json");
    return report.pass ? 0 : 1;
}

struct AblateArgs {
    std::string toggle;
    std::string corpus;
    std::int64_t steps = 200;
    std::int64_t horizon = 16;
    std::int64_t samples = 8;
    std::int64_t sample_steps = 16;
    std::uint64_t seed = 0;
    std::string out, emit_curves, manifest;
};

ModelConfig ablate_base_config() {
    ModelConfig cfg;  // toy scale
    cfg.patch_len = 8;
    cfg.horizon = 16;
    cfg.max_context = 256;
    cfg.layers = 2;
    cfg.dim = 32;
    cfg.ffn_dim = 64;
    cfg.heads = 4;
    cfg.tf_dim = 32;
    cfg.tf_layers = 1;
    cfg.validate();
    return cfg;
}

int run_ablate(const AblateArgs& a) {
    Manifest man("ablate", a.seed);
    man.parameters() = {{"toggle", a.toggle},
                        {"steps", a.steps},
                        {"horizon", a.horizon},
                        {"samples", a.samples},
                        {"sample_steps", a.sample_steps}};
    auto cfg = ablate_base_config();
    std::vector<MetricRow> rows;

    if (a.toggle == "kv_cache") {
        // weight-independent: compare incremental decoding against repeated
        // full forwards on one stream
        auto model = init_model(cfg, HeadKind::timeflow, a.seed);
        auto rec = kernel_synth(a.seed + 1, cfg.max_context, 5);
        std::vector<double> ctx(rec.values.begin(), rec.values.end());
        auto sample = patchify(ctx, cfg);
        NoGradGuard guard;

        reset_multiply_count();
        auto cache = make_kv_cache(cfg);
        double max_diff = 0;
        std::vector<Tensor> incremental;
        for (std::int64_t n = 0; n < sample.n_tokens; ++n)
            incremental.push_back(forward_incremental(model, slice_rows(sample.patches, n, n + 1),
                                                      slice_rows(sample.mask, n, n + 1), cache));
        auto inc_mults = multiply_count();

        reset_multiply_count();
        for (std::int64_t n = 0; n < sample.n_tokens; ++n) {
            auto h = encode(model, slice_rows(sample.patches, 0, n + 1),
                            slice_rows(sample.mask, 0, n + 1));
            for (std::int64_t j = 0; j < cfg.dim; ++j)
                max_diff = std::max(
                    max_diff, std::abs(static_cast<double>(h.at({n, j})) -
                                       incremental[static_cast<std::size_t>(n)].at({0, j})));
        }
        auto full_mults = multiply_count();
        rows.push_back({"kv_cache", "tokens", static_cast<double>(sample.n_tokens)});
        rows.push_back({"kv_cache", "max_abs_diff", max_diff});
        rows.push_back({"kv_cache", "incremental_multiplies", static_cast<double>(inc_mults)});
        rows.push_back({"kv_cache", "full_multiplies", static_cast<double>(full_mults)});
        rows.push_back({"kv_cache", "multiply_ratio",
                        static_cast<double>(inc_mults) / static_cast<double>(full_mults)});
    } else if (a.toggle == "rope" || a.toggle == "pre_ln") {
        auto toggled_cfg = cfg;
        if (a.toggle == "rope")
            toggled_cfg.rope_enabled = false;
        else
            toggled_cfg.pre_ln = false;

        std::vector<SeriesRecord> corpus;
        if (a.corpus.empty())
            corpus = make_synth_corpus(a.seed + 1, 48, 160, 5);
        else
            corpus = load_corpus(a.corpus);
        if (corpus.size() < 10) throw DataError("ablate: need at least 10 series");
        std::size_t held = corpus.size() / 5;
        std::vector<SeriesRecord> train_set(corpus.begin(), corpus.end() - static_cast<std::ptrdiff_t>(held));
        std::vector<SeriesRecord> eval_set(corpus.end() - static_cast<std::ptrdiff_t>(held), corpus.end());

        auto run_variant = [&](const std::string& name, const ModelConfig& vcfg) {
            auto model = init_model(vcfg, HeadKind::timeflow, a.seed);
            TrainConfig tcfg;
            tcfg.batch_size = 8;
            tcfg.steps = a.steps;
            tcfg.lr_peak = 1e-3;
            tcfg.warmup_steps = std::max<std::int64_t>(1, a.steps / 10);
            tcfg.min_context = vcfg.patch_len + vcfg.horizon;
            tcfg.max_context = std::min<std::int64_t>(vcfg.max_context, 128);
            tcfg.seed = a.seed;
            auto result = train_model(model, train_set, tcfg);
            double tail_loss = 0;
            std::int64_t tail_n = std::min<std::int64_t>(20, a.steps);
            for (std::int64_t i = a.steps - tail_n; i < a.steps; ++i)
                tail_loss += result.records[static_cast<std::size_t>(i)].loss;
            tail_loss /= static_cast<double>(tail_n);
            rows.push_back({name, "smoothed_final_loss", tail_loss});

            EvalOptions opts;
            opts.horizon = a.horizon;
            opts.n_samples = a.samples;
            opts.steps = a.sample_steps;
            opts.seed = a.seed;
            auto eval_rows = evaluate_model(model, eval_set, opts);
            for (const auto& r : eval_rows)
                if (r.id == "aggregate") rows.push_back({name, r.metric, r.value});
            if (!a.emit_curves.empty())
                write_loss_log(result.records, a.emit_curves + "." + name + ".csv");
        };
        run_variant("base", cfg);
        run_variant("toggled", toggled_cfg);
    } else {
        throw ConfigError("ablate: unknown toggle '" + a.toggle +
                          "' (expected rope, pre_ln, kv_cache)");
    }

    write_report(rows, a.out);
    man.output("report", a.out);
    if (!a.emit_curves.empty() && a.toggle != "kv_cache") {
        man.output("curves_base", a.emit_curves + ".base.csv");
        man.output("curves_toggled", a.emit_curves + ".toggled.csv");
    }
    man.write(a.manifest, a.out + ".manifest.json");
    for (const auto& r : rows) std::cout << r.id << " " << r.metric << " " << fmt9(r.value) << "\n";
    return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args) {
    CLI::App app{"sundial: generative time-series forecasting"};
    app.name("sundial");
    app.require_subcommand(1);
    bool debug_checks = false;
    app.add_flag("--debug-checks", debug_checks, "keep per-op finiteness scans on");

    SynthArgs synth;
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic corpus");
    synth_cmd->add_option("--seed", synth.seed, "rng seed")->capture_default_str();
    synth_cmd->add_option("--count", synth.count, "number of series")->required();
    synth_cmd->add_option("--length", synth.length, "points per series")->required();
    synth_cmd->add_option("--max-kernels", synth.max_kernels, "kernels per composite")
        ->capture_default_str();
    synth_cmd->add_option("--out", synth.out, "corpus output path")->required();
    synth_cmd->add_option("--manifest", synth.manifest, "manifest path");

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "train a model from scratch");
    train_cmd->add_option("--corpus", train.corpus, "training corpus")->required();
    train_cmd->add_option("--config", train.config, "model config json");
    train_cmd->add_option("--preset", train.preset, "named preset when no config file")
        ->capture_default_str();
    train_cmd->add_option("--objective", train.objective, "timeflow, mse, or diffusion")
        ->capture_default_str();
    train_cmd->add_option("--steps", train.steps, "optimization steps")->capture_default_str();
    train_cmd->add_option("--out-checkpoint", train.out_checkpoint, "checkpoint path")->required();
    train_cmd->add_option("--loss-log", train.loss_log, "per-step loss curve path");
    train_cmd->add_option("--emit-curves", train.emit_curves, "alias loss curve output");
    train_cmd->add_option("--seed", train.seed, "rng seed")->capture_default_str();
    train.flags.attach(train_cmd);

    FinetuneArgs finetune;
    auto* ft_cmd = app.add_subcommand("finetune", "continue training from a checkpoint");
    ft_cmd->add_option("--checkpoint", finetune.checkpoint, "starting checkpoint")->required();
    ft_cmd->add_option("--corpus", finetune.corpus, "fine-tuning corpus")->required();
    ft_cmd->add_option("--config", finetune.config, "expected architecture json");
    ft_cmd->add_option("--preset", finetune.preset, "expected architecture preset");
    ft_cmd->add_option("--steps", finetune.steps, "optimization steps")->capture_default_str();
    ft_cmd->add_option("--out-checkpoint", finetune.out_checkpoint, "checkpoint path")->required();
    ft_cmd->add_option("--loss-log", finetune.loss_log, "per-step loss curve path");
    ft_cmd->add_option("--seed", finetune.seed, "rng seed")->capture_default_str();
    finetune.flags.attach(ft_cmd);

    ForecastArgs fc;
    auto* fc_cmd = app.add_subcommand("forecast", "sample future trajectories");
    fc_cmd->add_option("--checkpoint", fc.checkpoint, "model checkpoint")->required();
    fc_cmd->add_option("--context-file", fc.context_file, "series to forecast (corpus format)")
        ->required();
    fc_cmd->add_option("--horizon", fc.horizon, "points to forecast")->required();
    fc_cmd->add_option("--samples", fc.samples, "ensemble size S")->capture_default_str();
    fc_cmd->add_option("--steps", fc.steps, "sampling steps K")->capture_default_str();
    fc_cmd->add_option("--levels", fc.levels, "quantile levels")->capture_default_str();
    fc_cmd->add_option("--seed", fc.seed, "rng seed")->capture_default_str();
    fc_cmd->add_option("--out", fc.out, "forecast csv path")->required();
    fc_cmd->add_option("--manifest", fc.manifest, "manifest path");

    EvaluateArgs ev;
    auto* ev_cmd = app.add_subcommand("evaluate", "score forecasts against held-out tails");
    ev_cmd->add_option("--checkpoint", ev.checkpoint, "model checkpoint")->required();
    ev_cmd->add_option("--corpus", ev.corpus, "evaluation corpus")->required();
    ev_cmd->add_option("--horizon", ev.horizon, "held-out points per series")
        ->capture_default_str();
    ev_cmd->add_option("--samples", ev.samples, "ensemble size S")->capture_default_str();
    ev_cmd->add_option("--steps", ev.steps, "sampling steps K")->capture_default_str();
    ev_cmd->add_option("--metrics", ev.metrics, "comma list of metrics")->capture_default_str();
    ev_cmd->add_option("--levels", ev.levels, "quantile levels")->capture_default_str();
    ev_cmd->add_option("--seed", ev.seed, "rng seed")->capture_default_str();
    ev_cmd->add_option("--out", ev.out, "report path")->required();
    ev_cmd->add_option("--manifest", ev.manifest, "manifest path");

    GradcheckArgs gc;
    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    gc_cmd->add_flag("--config-tiny", gc.config_tiny, "use the tiny config (the only option)");
    gc_cmd->add_option("--params", gc.params, "parameters to sample")->capture_default_str();
    gc_cmd->add_option("--tolerance", gc.tolerance, "max relative error")->capture_default_str();
    gc_cmd->add_option("--seed", gc.seed, "rng seed")->capture_default_str();
    gc_cmd->add_option("--out", gc.out, "report path");
    gc_cmd->add_option("--manifest", gc.manifest, "manifest path");

    AblateArgs ab;
    auto* ab_cmd = app.add_subcommand("ablate", "compare a toggled variant against the base");
    ab_cmd->add_option("--toggle", ab.toggle, "rope, pre_ln, or kv_cache")->required();
    ab_cmd->add_option("--corpus", ab.corpus, "corpus (default: internal synthetic)");
    ab_cmd->add_option("--steps", ab.steps, "training steps per variant")->capture_default_str();
    ab_cmd->add_option("--horizon", ab.horizon, "evaluation horizon")->capture_default_str();
    ab_cmd->add_option("--samples", ab.samples, "ensemble size")->capture_default_str();
    ab_cmd->add_option("--sample-steps", ab.sample_steps, "sampling steps K")
        ->capture_default_str();
    ab_cmd->add_option("--seed", ab.seed, "rng seed")->capture_default_str();
    ab_cmd->add_option("--out", ab.out, "report path")->required();
    ab_cmd->add_option("--emit-curves", ab.emit_curves, "loss curve path prefix");
    ab_cmd->add_option("--manifest", ab.manifest, "manifest path");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(std::move(reversed));
        train.objective_given = train_cmd->count("--objective") > 0;
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    }

    set_debug_checks(debug_checks);
    try {
        if (*synth_cmd) return run_synth(synth);
        if (*train_cmd) return run_train(train);
        if (*ft_cmd) return run_finetune(finetune);
        if (*fc_cmd) return run_forecast(fc);
        if (*ev_cmd) return run_evaluate(ev);
        if (*gc_cmd) return run_gradcheck(gc);
        if (*ab_cmd) return run_ablate(ab);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "usage error: no subcommand\n";
    return 2;
}

}  // namespace sundial
