#include "sonostack/cli.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "sonostack/checkpoint.hpp"
#include "sonostack/errors.hpp"
#include "sonostack/pipeline.hpp"
#include "sonostack/version.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace sonostack::cli {

namespace {

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::vector<std::string> g_raw_args;

// Run record written next to the outputs; rename makes it atomic.
struct Manifest {
    explicit Manifest(std::string command) {
        data["command"] = std::move(command);
        data["argv"] = g_raw_args;
        data["library_version"] = kVersion;
        data["started"] = utc_timestamp();
        data["config"] = json::object();
        data["outputs"] = json::array();
    }

    template <typename T>
    void config(const std::string& key, const T& value) {
        data["config"][key] = value;
    }

    void output(const fs::path& path) { data["outputs"].push_back(path.string()); }

    void write(const fs::path& out_dir) {
        data["finished"] = utc_timestamp();
        const fs::path final_path = out_dir / "manifest.json";
        const fs::path tmp_path = out_dir / "manifest.json.tmp";
        {
            std::ofstream out(tmp_path);
            out << data.dump(2) << '\n';
        }
        fs::rename(tmp_path, final_path);
    }

    json data;
};

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw PipelineError("cannot open " + path.string() + " for writing");
    out << text;
}

struct DatasetArgs {
    std::string dataset = "synth";
    std::string origin = "synth";
    int classes = 2;
    int per_class = 8;
    int folds = 4;

    void attach(CLI::App* cmd) {
        cmd->add_option("--dataset", dataset,
                        "Dataset root directory, or 'synth' for the built-in generator")
            ->capture_default_str();
        cmd->add_option("--origin", origin, "Corpus layout: esc50, us8k or synth")
            ->capture_default_str();
        cmd->add_option("--classes", classes, "Synthetic generator: number of classes")
            ->capture_default_str();
        cmd->add_option("--per-class", per_class, "Synthetic generator: clips per class")
            ->capture_default_str();
        cmd->add_option("--folds", folds, "Synthetic generator: fold count (also crossval k)")
            ->capture_default_str();
    }

    pipeline::Dataset load(uint64_t seed) const {
        if (dataset == "synth") {
            return pipeline::synth_dataset(classes, per_class, seed, folds);
        }
        return pipeline::load_dataset(dataset, pipeline::origin_from_name(origin));
    }

    void record(Manifest& manifest) const {
        manifest.config("dataset", dataset);
        manifest.config("origin", origin);
        if (dataset == "synth") {
            manifest.config("classes", classes);
            manifest.config("per_class", per_class);
            manifest.config("folds", folds);
        }
    }
};

struct FeatureArgs {
    int sample_rate = 22050;
    int n_fft = 1024;
    int hop = 512;
    int n_mels = 128;
    int n_mfcc = 40;
    int n_gtcc = 40;

    void attach(CLI::App* cmd) {
        cmd->add_option("--sample-rate", sample_rate, "Analysis sample rate (Hz)")
            ->capture_default_str();
        cmd->add_option("--n-fft", n_fft, "FFT frame length")->capture_default_str();
        cmd->add_option("--hop", hop, "STFT hop length")->capture_default_str();
        cmd->add_option("--n-mels", n_mels, "Mel / gammatone filter count")->capture_default_str();
        cmd->add_option("--n-mfcc", n_mfcc, "MFCC coefficients")->capture_default_str();
        cmd->add_option("--n-gtcc", n_gtcc, "GTCC coefficients")->capture_default_str();
    }

    features::FeatureConfig to_config() const {
        features::FeatureConfig cfg;
        cfg.sample_rate = sample_rate;
        cfg.n_fft = n_fft;
        cfg.hop = hop;
        cfg.n_mels = n_mels;
        cfg.n_mfcc = n_mfcc;
        cfg.n_gtcc = n_gtcc;
        cfg.validate();
        return cfg;
    }

    void record(Manifest& manifest) const {
        manifest.config("sample_rate", sample_rate);
        manifest.config("n_fft", n_fft);
        manifest.config("hop", hop);
        manifest.config("n_mels", n_mels);
        manifest.config("n_mfcc", n_mfcc);
        manifest.config("n_gtcc", n_gtcc);
    }
};

struct TrainArgs {
    int epochs = 150;
    int batch = 32;
    double lr = 1e-3;
    std::string optimizer = "adam";
    std::string schedule = "const";
    std::string freeze = "all";
    double weight_decay = 1e-4;

    CLI::Option* opt_epochs = nullptr;
    CLI::Option* opt_batch = nullptr;
    CLI::Option* opt_lr = nullptr;
    CLI::Option* opt_optimizer = nullptr;
    CLI::Option* opt_schedule = nullptr;

    void attach(CLI::App* cmd, int default_epochs) {
        epochs = default_epochs;
        opt_epochs = cmd->add_option("--epochs", epochs, "Training epochs")->capture_default_str();
        opt_batch = cmd->add_option("--batch", batch, "Mini-batch size")->capture_default_str();
        opt_lr = cmd->add_option("--lr", lr, "Learning rate")->capture_default_str();
        opt_optimizer =
            cmd->add_option("--optimizer", optimizer, "adam or adamw")->capture_default_str();
        opt_schedule =
            cmd->add_option("--schedule", schedule, "const or cosine")->capture_default_str();
        cmd->add_option("--freeze", freeze, "all, last or last_two")->capture_default_str();
        cmd->add_option("--weight-decay", weight_decay, "AdamW weight decay")
            ->capture_default_str();
    }

    // The transformer trains with its own published recipe; flags the user
    // did not set switch to those defaults when the architecture is ast.
    void apply_ast_defaults() {
        if (opt_optimizer && opt_optimizer->count() == 0) optimizer = "adamw";
        if (opt_schedule && opt_schedule->count() == 0) schedule = "cosine";
        if (opt_lr && opt_lr->count() == 0) lr = 5e-5;
        if (opt_batch && opt_batch->count() == 0) batch = 8;
        if (opt_epochs && opt_epochs->count() == 0) epochs = 10;
    }

    pipeline::TrainConfig to_config(uint64_t seed, const std::string& feature_name) const {
        pipeline::TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.batch_size = batch;
        cfg.learning_rate = lr;
        cfg.optimizer = pipeline::optimizer_from_name(optimizer);
        cfg.schedule = pipeline::schedule_from_name(schedule);
        cfg.freeze = pipeline::freeze_from_name(freeze);
        cfg.weight_decay = weight_decay;
        cfg.seed = seed;
        cfg.feature_config = feature_name;
        return cfg;
    }

    void record(Manifest& manifest) const {
        manifest.config("epochs", epochs);
        manifest.config("batch", batch);
        manifest.config("lr", lr);
        manifest.config("optimizer", optimizer);
        manifest.config("schedule", schedule);
        manifest.config("freeze", freeze);
        manifest.config("weight_decay", weight_decay);
    }
};

models::ModelSpec make_spec(const std::string& arch, int in_channels, int n_classes,
                            bool ast_paper_scale) {
    models::ModelSpec spec;
    spec.arch = models::architecture_from_name(arch);
    spec.in_channels = in_channels;
    spec.n_classes = n_classes;
    if (ast_paper_scale) spec.ast = models::AstConfig::paper_scale();
    spec.validate();
    return spec;
}

// Validates a Table-style feature name; unknown tokens are usage errors.
std::vector<features::FeatureKind> parse_features_or_usage(const std::string& name) {
    return features::config_from_name(name);
}

std::vector<int> parse_fold_list(const std::string& text) {
    std::vector<int> folds;
    std::istringstream in(text);
    std::string tok;
    while (std::getline(in, tok, ',')) {
        try {
            folds.push_back(std::stoi(tok));
        } catch (const std::exception&) {
            throw ConfigError("bad fold list entry '" + tok + "'");
        }
    }
    if (folds.empty()) throw ConfigError("empty fold list");
    return folds;
}

int run_impl(const std::vector<std::string>& args) {
    g_raw_args = args;
    CLI::App app{"sonostack: stacked-feature sound classification toolkit"};
    app.require_subcommand(1);
    app.fallthrough(); // --seed/--out-dir may follow the subcommand
    app.set_version_flag("--version", kVersion);
    app.set_config("--config", "", "Read options from an INI file (flags override it)");

    std::string out_dir = ".";
    uint64_t seed = 42;
    app.add_option("--out-dir", out_dir, "Directory all outputs are written to")
        ->capture_default_str();
    app.add_option("--seed", seed, "Run seed")->envname("SONOSTACK_SEED")->capture_default_str();

    // ---- extract ----------------------------------------------------------
    auto* extract = app.add_subcommand("extract", "Extract a stacked feature tensor from a WAV");
    std::string ex_in, ex_out = "features.fmap", ex_features = "LM";
    double ex_seconds = 3.0;
    extract->add_option("--in", ex_in, "Input WAV file")->required();
    extract->add_option("--out", ex_out, "Output .fmap file (under --out-dir)")
        ->capture_default_str();
    extract->add_option("--features", ex_features, "Feature configuration, e.g. MFCC+GTCC+CH+LM")
        ->capture_default_str();
    extract->add_option("--seconds", ex_seconds, "Duration the clip is trimmed/padded to")
        ->capture_default_str();
    FeatureArgs ex_fargs;
    ex_fargs.attach(extract);

    // ---- synth ------------------------------------------------------------
    auto* synth = app.add_subcommand("synth", "Generate the synthetic desk-scale corpus");
    int sy_classes = 2, sy_per_class = 8, sy_folds = 4;
    synth->add_option("--classes", sy_classes, "Number of classes")->capture_default_str();
    synth->add_option("--per-class", sy_per_class, "Clips per class")->capture_default_str();
    synth->add_option("--folds", sy_folds, "Fold count")->capture_default_str();

    // ---- train ------------------------------------------------------------
    auto* train = app.add_subcommand("train", "Train a model on dataset folds");
    std::string tr_arch = "cnn1", tr_features = "LM", tr_train_folds = "", tr_checkpoint_name = "model.ssck";
    int tr_val_fold = 0;
    bool tr_ast_paper = false;
    train->add_option("--arch", tr_arch, "cnn1, cnn2 or ast")->capture_default_str();
    train->add_option("--features", tr_features, "Feature configuration")->capture_default_str();
    train->add_option("--train-folds", tr_train_folds,
                      "Comma-separated training folds (default: all but val fold)");
    train->add_option("--val-fold", tr_val_fold, "Validation fold (default: highest fold)");
    train->add_option("--checkpoint-name", tr_checkpoint_name, "Checkpoint file name")
        ->capture_default_str();
    train->add_flag("--ast-paper", tr_ast_paper, "Use the published AST dimensions");
    DatasetArgs tr_data;
    tr_data.attach(train);
    FeatureArgs tr_fargs;
    tr_fargs.attach(train);
    TrainArgs tr_targs;
    tr_targs.attach(train, 150);

    // ---- finetune ---------------------------------------------------------
    auto* finetune = app.add_subcommand("finetune", "Last-layer transfer onto a new dataset");
    std::string ft_checkpoint, ft_features = "", ft_out_name = "finetuned.ssck";
    finetune->add_option("--checkpoint", ft_checkpoint, "Pretrained checkpoint")->required();
    finetune->add_option("--features", ft_features,
                         "Feature configuration (must match the checkpoint; default: stored)");
    finetune->add_option("--checkpoint-name", ft_out_name, "Output checkpoint file name")
        ->capture_default_str();
    DatasetArgs ft_data;
    ft_data.attach(finetune);
    FeatureArgs ft_fargs;
    ft_fargs.attach(finetune);
    TrainArgs ft_targs;
    ft_targs.attach(finetune, 50);

    // ---- crossval ---------------------------------------------------------
    auto* crossval = app.add_subcommand("crossval", "K-fold cross-validation");
    std::string cv_arch = "cnn1", cv_features = "LM";
    int cv_jobs = 1;
    bool cv_ast_paper = false;
    crossval->add_option("--arch", cv_arch, "cnn1, cnn2 or ast")->capture_default_str();
    crossval->add_option("--features", cv_features, "Feature configuration")->capture_default_str();
    crossval->add_option("--jobs", cv_jobs, "Parallel fold workers")->capture_default_str();
    crossval->add_flag("--ast-paper", cv_ast_paper, "Use the published AST dimensions");
    DatasetArgs cv_data;
    cv_data.attach(crossval);
    FeatureArgs cv_fargs;
    cv_fargs.attach(crossval);
    TrainArgs cv_targs;
    cv_targs.attach(crossval, 30);

    // ---- eval -------------------------------------------------------------
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on dataset folds");
    std::string ev_checkpoint, ev_folds = "";
    eval->add_option("--checkpoint", ev_checkpoint, "Checkpoint to evaluate")->required();
    eval->add_option("--eval-folds", ev_folds, "Comma-separated folds (default: all)");
    DatasetArgs ev_data;
    ev_data.attach(eval);
    FeatureArgs ev_fargs;
    ev_fargs.attach(eval);

    // ---- bench ------------------------------------------------------------
    auto* bench = app.add_subcommand("bench", "Single-sample inference latency benchmark");
    std::string be_arch = "cnn1", be_checkpoint = "";
    int be_iterations = 50, be_warmup = 5, be_channels = 3, be_classes = 50, be_width = 128;
    bool be_ast_paper = false;
    bench->add_option("--arch", be_arch, "cnn1, cnn2 or ast")->capture_default_str();
    bench->add_option("--checkpoint", be_checkpoint, "Benchmark a saved model instead");
    bench->add_option("--iterations", be_iterations, "Timed iterations")->capture_default_str();
    bench->add_option("--warmup", be_warmup, "Untimed warm-up passes")->capture_default_str();
    bench->add_option("--channels", be_channels, "Input channels")->capture_default_str();
    bench->add_option("--bench-classes", be_classes, "Classifier width")->capture_default_str();
    bench->add_option("--width", be_width, "Input frame count (height is fixed at 128)")
        ->capture_default_str();
    bench->add_flag("--ast-paper", be_ast_paper, "Use the published AST dimensions");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) { // --help / --version
            std::cout << app.help();
            return 0;
        }
        std::cerr << "usage error: " << e.what() << '\n';
        std::cerr << app.help();
        return 2;
    }

    const fs::path out_root(out_dir);
    fs::create_directories(out_root);

    try {
        if (*extract) {
            const auto kinds = parse_features_or_usage(ex_features);
            const auto fcfg = ex_fargs.to_config();

            Manifest manifest("extract");
            manifest.config("in", ex_in);
            manifest.config("features", features::config_to_name(kinds));
            manifest.config("seconds", ex_seconds);
            manifest.config("seed", seed);
            ex_fargs.record(manifest);

            auto clip = audio::load_wav(ex_in);
            clip = audio::resample(clip, fcfg.sample_rate);
            clip = audio::fix_duration(clip, ex_seconds);
            std::vector<features::FeatureMap> maps;
            for (auto kind : kinds) {
                maps.push_back(features::resize_map(features::extract(kind, clip, fcfg)));
            }
            const fs::path out_path = out_root / ex_out;
            features::write_fmap_file(out_path.string(), maps);
            manifest.output(out_path);
            manifest.write(out_root);
            std::cout << "wrote " << maps.size() << " channel(s) of "
                      << features::kStackSize << "x" << features::kStackSize << " to "
                      << out_path.string() << '\n';
            return 0;
        }

        if (*synth) {
            Manifest manifest("synth");
            manifest.config("classes", sy_classes);
            manifest.config("per_class", sy_per_class);
            manifest.config("folds", sy_folds);
            manifest.config("seed", seed);

            const auto ds = pipeline::synth_dataset(sy_classes, sy_per_class, seed, sy_folds);
            pipeline::write_dataset(ds, out_root.string());
            manifest.output(out_root / "meta.csv");
            manifest.write(out_root);
            std::cout << "wrote " << ds.items.size() << " clips, " << ds.labels.size()
                      << " classes to " << out_root.string() << '\n';
            return 0;
        }

        if (*train) {
            parse_features_or_usage(tr_features);
            const auto ds = tr_data.load(seed);
            const auto fcfg = tr_fargs.to_config();
            auto tcfg = tr_targs.to_config(seed, tr_features);

            const int val_fold = tr_val_fold > 0 ? tr_val_fold : ds.n_folds();
            std::vector<int> train_folds;
            if (tr_train_folds.empty()) {
                train_folds = pipeline::all_folds_except(ds, val_fold);
            } else {
                train_folds = parse_fold_list(tr_train_folds);
            }

            if (tr_arch == "ast") {
                tr_targs.apply_ast_defaults();
                tcfg = tr_targs.to_config(seed, tr_features);
            }
            const auto kinds = features::config_from_name(tr_features);
            const auto spec = make_spec(tr_arch, static_cast<int>(kinds.size()),
                                        static_cast<int>(ds.labels.size()), tr_ast_paper);

            Manifest manifest("train");
            manifest.config("arch", tr_arch);
            manifest.config("features", tr_features);
            manifest.config("val_fold", val_fold);
            manifest.config("seed", seed);
            tr_data.record(manifest);
            tr_fargs.record(manifest);
            tr_targs.record(manifest);

            nn::Rng init_rng(seed);
            auto model = models::build_model<float>(spec, init_rng);
            const auto history = pipeline::train(*model, ds, train_folds, val_fold, tcfg, fcfg);

            const fs::path ckpt_path = out_root / tr_checkpoint_name;
            const fs::path hist_path = out_root / "history.csv";
            models::save_checkpoint(*model, ckpt_path.string());
            write_text_file(hist_path, pipeline::history_csv(history));
            manifest.output(ckpt_path);
            manifest.output(hist_path);
            manifest.write(out_root);

            const auto& last = history.back();
            std::cout << "epoch " << last.epoch << ": train_acc "
                      << last.train_acc << ", val_acc " << last.val_acc << '\n';
            std::cout << "checkpoint: " << ckpt_path.string() << '\n';
            return 0;
        }

        if (*finetune) {
            if (!ft_features.empty()) parse_features_or_usage(ft_features);
            const auto ds = ft_data.load(seed);
            const auto fcfg = ft_fargs.to_config();
            auto tcfg = ft_targs.to_config(seed, ft_features);

            Manifest manifest("finetune");
            manifest.config("checkpoint", ft_checkpoint);
            manifest.config("features", ft_features.empty() ? "(stored)" : ft_features);
            manifest.config("seed", seed);
            ft_data.record(manifest);
            ft_fargs.record(manifest);
            ft_targs.record(manifest);

            auto result = pipeline::transfer_finetune(ft_checkpoint, ds, tcfg, fcfg);

            const fs::path ckpt_path = out_root / ft_out_name;
            const fs::path hist_path = out_root / "history.csv";
            models::save_checkpoint(*result.model, ckpt_path.string());
            write_text_file(hist_path, pipeline::history_csv(result.history));
            manifest.output(ckpt_path);
            manifest.output(hist_path);
            manifest.write(out_root);

            const auto& last = result.history.back();
            std::cout << "epoch " << last.epoch << ": train_acc " << last.train_acc
                      << ", val_acc " << last.val_acc << '\n';
            return 0;
        }

        if (*crossval) {
            parse_features_or_usage(cv_features);
            const auto ds = cv_data.load(seed);
            const auto fcfg = cv_fargs.to_config();
            auto tcfg = cv_targs.to_config(seed, cv_features);

            if (cv_arch == "ast") {
                cv_targs.apply_ast_defaults();
                tcfg = cv_targs.to_config(seed, cv_features);
            }
            const int k = cv_data.dataset == "synth" ? cv_data.folds : ds.n_folds();
            const auto kinds = features::config_from_name(cv_features);
            const auto spec = make_spec(cv_arch, static_cast<int>(kinds.size()),
                                        static_cast<int>(ds.labels.size()), cv_ast_paper);

            Manifest manifest("crossval");
            manifest.config("arch", cv_arch);
            manifest.config("features", cv_features);
            manifest.config("k", k);
            manifest.config("jobs", cv_jobs);
            manifest.config("seed", seed);
            cv_data.record(manifest);
            cv_fargs.record(manifest);
            cv_targs.record(manifest);

            const auto result = pipeline::cross_validate(spec, ds, k, tcfg, fcfg, cv_jobs);
            const std::string csv = pipeline::crossval_csv(cv_arch, cv_features, result);

            const fs::path csv_path = out_root / "crossval.csv";
            write_text_file(csv_path, csv);
            manifest.output(csv_path);
            manifest.write(out_root);
            std::cout << csv;
            return 0;
        }

        if (*eval) {
            const auto fcfg = ev_fargs.to_config();
            auto model = models::load_checkpoint(ev_checkpoint);
            const auto ds = ev_data.load(seed);

            std::vector<int> folds;
            if (ev_folds.empty()) {
                for (int f = 1; f <= ds.n_folds(); ++f) folds.push_back(f);
            } else {
                folds = parse_fold_list(ev_folds);
            }

            Manifest manifest("eval");
            manifest.config("checkpoint", ev_checkpoint);
            manifest.config("seed", seed);
            ev_data.record(manifest);
            ev_fargs.record(manifest);

            const auto metrics = pipeline::evaluate(*model, ds, folds, fcfg);
            const std::string csv = pipeline::metrics_csv(metrics);
            const fs::path csv_path = out_root / "metrics.csv";
            write_text_file(csv_path, csv);
            manifest.output(csv_path);
            manifest.write(out_root);
            std::cout << csv;
            return 0;
        }

        if (*bench) {
            Manifest manifest("bench");
            manifest.config("iterations", be_iterations);
            manifest.config("warmup", be_warmup);
            manifest.config("seed", seed);

            std::unique_ptr<models::Model<float>> model;
            int channels = be_channels;
            if (!be_checkpoint.empty()) {
                model = models::load_checkpoint(be_checkpoint);
                channels = model->spec().in_channels;
                manifest.config("checkpoint", be_checkpoint);
            } else {
                if (be_arch == "ast") channels = 1;
                const auto spec = make_spec(be_arch, channels, be_classes, be_ast_paper);
                nn::Rng rng(seed);
                model = models::build_model<float>(spec, rng);
                manifest.config("arch", be_arch);
                manifest.config("channels", channels);
                manifest.config("classes", be_classes);
                manifest.config("ast_paper", be_ast_paper);
            }

            features::StackedTensor sample;
            sample.height = features::kStackSize;
            sample.width = be_width;
            sample.channels = channels;
            sample.data.resize(static_cast<size_t>(sample.height) * sample.width * channels);
            nn::Rng rng(seed);
            for (auto& v : sample.data) v = rng.uniform(-1.0, 1.0);

            const auto result = pipeline::benchmark_inference(*model, sample, be_iterations,
                                                              be_warmup);
            std::ostringstream csv;
            csv << "iterations,mean_ms,std_ms\n"
                << result.iterations << ',' << result.mean_ms << ',' << result.std_ms << '\n';
            const fs::path csv_path = out_root / "bench.csv";
            write_text_file(csv_path, csv.str());
            manifest.output(csv_path);
            manifest.write(out_root);
            std::cout << csv.str();
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2; // no subcommand matched
}

} // namespace

int run(const std::vector<std::string>& args) { return run_impl(args); }

int run(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_impl(args);
}

} // namespace sonostack::cli
