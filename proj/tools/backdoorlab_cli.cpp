// backdoorlab command-line front end.
//
// Subcommands: generate, poison, train, eval, sweep, verify-theory, bench.
// Exit codes: 0 success, 1 verification/eval/runtime failure, 2 configuration
// error.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>

#include "backdoorlab/experiment.hpp"
#include "backdoorlab/theory.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace backdoorlab;

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

void write_trace_csv(const std::string& path, const std::vector<EpochStats>& trace) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "epoch,det_loss,penalty,total\n";
    for (std::size_t i = 0; i < trace.size(); ++i)
        f << i << ',' << fmt(trace[i].det_loss) << ',' << fmt(trace[i].penalty) << ','
          << fmt(trace[i].total) << '\n';
}

void print_class_balance(const DatasetManifest& m) {
    std::map<int, int> counts;
    int total = 0;
    for (const auto& scene : m.scenes)
        for (const auto& obj : scene.objects) {
            ++counts[obj.original_label];
            ++total;
        }
    std::cout << m.split << " split: " << m.scenes.size() << " scenes, " << total
              << " objects;";
    for (const auto& [cls, n] : counts)
        std::cout << " class " << cls << ": " << n << " (" << fmt(double(n) / total) << ")";
    std::cout << '\n';
}

/// Data-only baselines train without the penalty by definition.
void apply_method_rules(TrainConfig& tc, AttackStrategy strategy) {
    if (data_only_attack(strategy)) tc.penalty.lambda = 0.0;
}

struct Flags {
    std::string config_path;
    std::string out_dir;
    std::string preset;
    std::optional<std::uint64_t> seed;
    std::optional<double> tau, rho, lambda, ratio;
    std::optional<std::string> placement, loss, head;
    int workers = static_cast<int>(std::thread::hardware_concurrency());
};

/// preset < config file < BACKDOORLAB_SEED < flags.
ExperimentConfig resolve_config(const Flags& fl, json* file_json_out) {
    ExperimentConfig cfg = fl.preset.empty() ? default_config() : preset_config(fl.preset);
    json file_json = json::object();
    if (!fl.config_path.empty()) {
        file_json = read_json_file(fl.config_path);
        merge_config_json(cfg, file_json);
    }
    if (file_json_out != nullptr) *file_json_out = file_json;

    if (const auto env = env_seed()) cfg.seed = *env;
    if (fl.seed) cfg.seed = *fl.seed;
    if (fl.tau) cfg.training.penalty.tau = *fl.tau;
    if (fl.rho) cfg.training.penalty.rho = *fl.rho;
    if (fl.lambda) cfg.training.penalty.lambda = *fl.lambda;
    if (fl.ratio) cfg.attack.ratio = *fl.ratio;
    try {
        if (fl.placement) cfg.attack.placement = placement_from_name(*fl.placement);
        if (fl.loss) {
            cfg.training.loss = loss_from_name(*fl.loss);
            if (!fl.head)
                cfg.training.head_mode = cfg.training.loss == LossKind::CrossEntropy
                                             ? HeadMode::Softmax
                                             : HeadMode::Independent;
        }
        if (fl.head) cfg.training.head_mode = head_from_name(*fl.head);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    cfg.training.penalty.head_mode = cfg.training.head_mode;
    if (!fl.out_dir.empty()) cfg.output.dir = fl.out_dir;
    return cfg;
}

int cmd_generate(const ExperimentConfig& cfg) {
    cfg.require_sections({"dataset", "output"});
    const DatasetManifest train = generate_dataset(cfg.dataset, cfg.seed, "train");
    DatasetConfig test_cfg = cfg.dataset;
    test_cfg.n_scenes = cfg.eval.test_scenes;
    const DatasetManifest test = generate_dataset(test_cfg, cfg.seed, "test");
    const std::string train_path = save_manifest(train, cfg.output.dir, "train");
    const std::string test_path = save_manifest(test, cfg.output.dir, "test");
    write_effective_config(cfg, cfg.output.dir);
    print_class_balance(train);
    print_class_balance(test);
    std::cout << "wrote " << train_path << " and " << test_path << '\n';
    return 0;
}

int cmd_poison(const ExperimentConfig& cfg, const std::string& manifest_path) {
    cfg.require_sections({"attack", "output"});
    const DatasetManifest clean = load_manifest(manifest_path);
    const AttackResult res = apply_attack(clean, cfg.attack, cfg.seed);
    for (const auto& w : res.warnings) std::cerr << "warning: " << w << '\n';
    const std::string path =
        save_manifest(res.manifest, cfg.output.dir, res.manifest.split + "_poisoned");
    write_effective_config(cfg, cfg.output.dir);
    std::cout << "strategy " << strategy_name(cfg.attack.strategy) << ", realized ratio "
              << fmt(res.manifest.realized_ratio) << "; wrote " << path << '\n';
    return 0;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& manifest_path,
              const std::string& init_checkpoint) {
    cfg.require_sections({"training", "output"});
    const DatasetManifest manifest = load_manifest(manifest_path);
    TrainConfig tc = cfg.training;
    tc.seed = cfg.seed;
    tc.penalty.head_mode = tc.head_mode;
    apply_method_rules(tc, manifest.poison.strategy);
    tc.validate();

    DetectorParams init;
    bool has_init = false;
    if (!init_checkpoint.empty()) {
        auto [params, saved_cfg] = load_checkpoint(init_checkpoint);
        (void)saved_cfg;
        if (params.n_classes != manifest.generation.n_classes)
            throw std::runtime_error("init checkpoint has " + std::to_string(params.n_classes) +
                                     " classes but the manifest has " +
                                     std::to_string(manifest.generation.n_classes));
        init = std::move(params);
        has_init = true;
    }

    const TrainingSet ts = prepare_training_set(manifest, tc);
    const TrainResult res = train(ts, tc, has_init ? &init : nullptr);

    fs::create_directories(cfg.output.dir);
    const std::string ckpt = (fs::path(cfg.output.dir) / "checkpoint.json").string();
    save_checkpoint(res.params, tc, ckpt);
    write_trace_csv((fs::path(cfg.output.dir) / "trace.csv").string(), res.trace);
    write_effective_config(cfg, cfg.output.dir);
    if (res.diverged) {
        std::cerr << "training diverged at epoch " << res.diverged_epoch
                  << "; last finite state saved to " << ckpt << '\n';
        return 1;
    }
    if (!res.trace.empty())
        std::cout << "final det_loss " << fmt(res.trace.back().det_loss) << ", penalty "
                  << fmt(res.trace.back().penalty) << '\n';
    std::cout << "wrote " << ckpt << '\n';
    return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint_path,
             const std::string& manifest_path) {
    cfg.require_sections({"attack", "eval", "output"});
    auto [params, tc] = load_checkpoint(checkpoint_path);
    const DatasetManifest test = load_manifest(manifest_path);
    const ResultRow row =
        evaluate_detector(params, tc, test, cfg.attack, cfg.eval, cfg.seed, "eval");

    fs::create_directories(cfg.output.dir);
    write_results_csv((fs::path(cfg.output.dir) / "results.csv").string(), {row});
    std::vector<Detection> dets;
    for (const auto& scene : test.scenes)
        for (const auto& p : predict(params, scene.image, 0.05, 0.5))
            dets.push_back({scene.id, p.box, p.cls, p.score});
    write_detections_json((fs::path(cfg.output.dir) / "detections.json").string(), dets);
    write_effective_config(cfg, cfg.output.dir);
    std::cout << results_csv_header() << '\n' << format_result_row(row) << '\n';
    return 0;
}

int cmd_sweep(const ExperimentConfig& cfg, const json& file_json, const std::string& axis_flag,
              const std::string& values_flag, std::optional<int> repeats_flag, int workers) {
    cfg.require_sections({"dataset", "attack", "training", "eval", "output"});

    SweepSpec spec;
    if (!axis_flag.empty()) {
        spec.axis = axis_from_name(axis_flag);
        if (values_flag.empty()) throw ConfigError("--axis requires --values");
        std::stringstream ss(values_flag);
        std::string token;
        while (std::getline(ss, token, ',')) {
            try {
                spec.values.push_back(json::parse(token));
            } catch (const json::exception&) {
                spec.values.emplace_back(token);
            }
        }
        spec.repeats = repeats_flag.value_or(1);
        spec.validate();
    } else if (file_json.contains("sweep")) {
        spec = parse_sweep(file_json.at("sweep"));
        if (repeats_flag) spec.repeats = *repeats_flag;
    } else {
        throw ConfigError("sweep needs a 'sweep' config section or --axis/--values flags");
    }

    const SweepOutcome outcome = run_sweep(cfg, spec, workers);
    fs::create_directories(cfg.output.dir);
    write_results_csv((fs::path(cfg.output.dir) / "results.csv").string(), outcome.rows());
    write_sweep_status((fs::path(cfg.output.dir) / "sweep_status.csv").string(), outcome);
    write_effective_config(cfg, cfg.output.dir,
                           json{{"sweep",
                                 {{"axis", axis_name(spec.axis)},
                                  {"values", spec.values},
                                  {"repeats", spec.repeats}}}});

    int failed = 0;
    for (const auto& p : outcome.points) {
        if (!p.ok) {
            ++failed;
            std::cerr << p.run_id << ": " << p.status << '\n';
        }
    }
    std::cout << outcome.points.size() - failed << "/" << outcome.points.size()
              << " sweep points succeeded; wrote "
              << (fs::path(cfg.output.dir) / "results.csv").string() << '\n';
    return failed == static_cast<int>(outcome.points.size()) ? 1 : 0;
}

int cmd_verify_theory(const ExperimentConfig& cfg, const ToleranceSpec& tol) {
    const auto reports = run_all_checks(cfg.seed, tol);
    fs::create_directories(cfg.output.dir);
    write_theory_report((fs::path(cfg.output.dir) / "theory_report.json").string(), reports);
    for (const auto& r : reports) {
        std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << " (max_error " << fmt(r.max_error)
                  << ", tolerance " << fmt(r.tolerance) << ")\n";
        if (!r.pass && !r.detail.empty()) std::cout << "      " << r.detail << '\n';
    }
    return all_passed(reports) ? 0 : 1;
}

int cmd_bench(const ExperimentConfig& cfg, int batches) {
    cfg.require_sections({"dataset", "attack", "training", "output"});
    TrainConfig tc = cfg.training;
    tc.seed = cfg.seed;
    tc.penalty.head_mode = tc.head_mode;
    tc.validate();

    const DatasetManifest clean = generate_dataset(cfg.dataset, cfg.seed, "train");
    const AttackResult res = apply_attack(clean, cfg.attack, cfg.seed);
    const TrainingSet ts = prepare_training_set(res.manifest, tc);
    const BenchmarkResult b = benchmark_penalty_overhead(ts, tc, batches);

    fs::create_directories(cfg.output.dir);
    const std::string path = (fs::path(cfg.output.dir) / "bench.csv").string();
    {
        std::ofstream f(path);
        if (!f) throw std::runtime_error("cannot write " + path);
        f << "penalty_us_mean,penalty_us_std,total_us_mean,total_us_std,share_pct,share_std_pct,"
             "mean_matched_pairs\n";
        f << fmt(b.penalty_mean_us) << ',' << fmt(b.penalty_std_us) << ',' << fmt(b.total_mean_us)
          << ',' << fmt(b.total_std_us) << ',' << fmt(b.share_pct) << ',' << fmt(b.share_std_pct)
          << ',' << fmt(b.mean_matched_pairs) << '\n';
    }
    write_effective_config(cfg, cfg.output.dir);
    std::cout << "penalty " << fmt(b.penalty_mean_us) << " +- " << fmt(b.penalty_std_us)
              << " us, total " << fmt(b.total_mean_us) << " +- " << fmt(b.total_std_us)
              << " us, share " << fmt(b.share_pct) << " +- " << fmt(b.share_std_pct)
              << " % (mean matched pairs " << fmt(b.mean_matched_pairs) << ")\n";
    std::cout << "wrote " << path << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"backdoorlab: backdoor attacks on a desk-scale object detector"};
    app.require_subcommand(1);
    app.fallthrough();

    Flags fl;
    app.add_option("--config", fl.config_path, "JSON config file");
    app.add_option("--seed", fl.seed, "global seed (overrides config and BACKDOORLAB_SEED)");
    app.add_option("--out", fl.out_dir, "output directory");
    app.add_option("--preset", fl.preset, "named preset (paper-default)");
    app.add_option("--workers", fl.workers, "sweep worker pool size");
    app.add_option("--tau", fl.tau, "penalty threshold tau");
    app.add_option("--rho", fl.rho, "penalty IoU gate rho");
    app.add_option("--lambda", fl.lambda, "penalty weight lambda");
    app.add_option("--ratio", fl.ratio, "poisoning ratio");
    app.add_option("--placement", fl.placement, "trigger placement (center|random|high|low|both)");
    app.add_option("--loss", fl.loss, "detection loss (ce|bce|focal)");
    app.add_option("--head", fl.head, "classifier head (independent|softmax)");

    auto* c_generate = app.add_subcommand("generate", "generate clean train/test manifests");
    auto* c_poison = app.add_subcommand("poison", "apply an attack to a manifest");
    std::string poison_manifest;
    c_poison->add_option("--manifest", poison_manifest, "clean manifest JSON")->required();
    auto* c_train = app.add_subcommand("train", "train a detector on a manifest");
    std::string train_manifest, init_checkpoint;
    c_train->add_option("--manifest", train_manifest, "training manifest JSON")->required();
    c_train->add_option("--init-checkpoint", init_checkpoint, "checkpoint to resume from");
    auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on a test manifest");
    std::string eval_checkpoint, eval_manifest;
    c_eval->add_option("--checkpoint", eval_checkpoint, "checkpoint JSON")->required();
    c_eval->add_option("--manifest", eval_manifest, "clean test manifest JSON")->required();
    auto* c_sweep = app.add_subcommand("sweep", "run a parameter sweep");
    std::string sweep_axis, sweep_values;
    std::optional<int> sweep_repeats;
    c_sweep->add_option("--axis", sweep_axis,
                        "sweep axis (lambda|poison_ratio|placement|loss|trigger_color)");
    c_sweep->add_option("--values", sweep_values, "comma-separated axis values");
    c_sweep->add_option("--repeats", sweep_repeats, "repeats per point");
    auto* c_verify = app.add_subcommand("verify-theory", "run the theory oracle suite");
    ToleranceSpec tol;
    c_verify->add_option("--rel-tol", tol.rel_tol, "relative tolerance for flow drift checks");
    c_verify->add_option("--fd-tol", tol.fd_tol, "finite-difference tolerance");
    c_verify->add_option("--first-order-tol", tol.first_order_tol,
                         "first-order clean-preservation tolerance");
    c_verify->add_option("--ulps", tol.ulps, "margin-shift tolerance in ulps");
    auto* c_bench = app.add_subcommand("bench", "measure penalty overhead");
    int bench_batches = 20;
    c_bench->add_option("--batches", bench_batches, "number of timed batches");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        json file_json;
        const ExperimentConfig cfg = resolve_config(fl, &file_json);
        if (app.got_subcommand(c_generate)) return cmd_generate(cfg);
        if (app.got_subcommand(c_poison)) return cmd_poison(cfg, poison_manifest);
        if (app.got_subcommand(c_train)) return cmd_train(cfg, train_manifest, init_checkpoint);
        if (app.got_subcommand(c_eval)) return cmd_eval(cfg, eval_checkpoint, eval_manifest);
        if (app.got_subcommand(c_sweep))
            return cmd_sweep(cfg, file_json, sweep_axis, sweep_values, sweep_repeats, fl.workers);
        if (app.got_subcommand(c_verify)) return cmd_verify_theory(cfg, tol);
        if (app.got_subcommand(c_bench)) return cmd_bench(cfg, bench_batches);
        std::cerr << "no subcommand\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
